"""Closed-loop rollouts, empirical safety rates and level-set grids.

Integration is classical fixed-step RK4 with the input held over each
step. Safety during rollout is judged by the system's ground-truth
labeler, not by the learned barrier; the barrier value is recorded along
the trajectory for diagnostics.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .controller import SafetyFilter
from .dynamics import ControlAffineSystem, Label, closed_loop_field
from .mlp import MlpCertificate, forward_batch
from .sampling import rejection_sample_label


class RolloutStatus(str, Enum):
    COMPLETED = "completed"
    ENTERED_UNSAFE = "entered_unsafe"
    FILTER_INFEASIBLE = "filter_infeasible"
    EXITED_DOMAIN = "exited_domain"


@dataclass
class Rollout:
    states: np.ndarray         # (T+1, n)
    inputs: np.ndarray         # (T, m)
    h_values: np.ndarray       # (T+1,)
    filter_active: np.ndarray  # (T,) constraint binding at each step
    filter_slack: np.ndarray   # (T,) achieved a.u - b at each step
    dt: float
    status: RolloutStatus


def rk4_step(sys: ControlAffineSystem, x, u, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step of f(x) + g(x) u with u held constant."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    k1 = closed_loop_field(sys, x, u)
    k2 = closed_loop_field(sys, x + 0.5 * dt * k1, u)
    k3 = closed_loop_field(sys, x + 0.5 * dt * k2, u)
    k4 = closed_loop_field(sys, x + dt * k3, u)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite state after RK4 step from {x}")
    return out


def _wrap_angles(sys: ControlAffineSystem, x: np.ndarray) -> np.ndarray:
    for dim in sys.angle_dims:
        x[dim] = np.mod(x[dim] + np.pi, 2.0 * np.pi) - np.pi
    return x


def rollout(sys: ControlAffineSystem, filt: SafetyFilter, x0, horizon_steps: int,
            dt: float) -> Rollout:
    """Filter, step, repeat; stops early on unsafe entry, filter
    infeasibility, or domain exit. Failure modes land in the status field
    rather than raising."""
    x = np.asarray(x0, dtype=float).copy()
    states = [x.copy()]
    inputs: list[np.ndarray] = []
    h_vals = [float(forward_batch(filt.certificate, x[None, :])[0])]
    actives: list[bool] = []
    slacks: list[float] = []
    status = RolloutStatus.COMPLETED
    for _ in range(horizon_steps):
        if sys.label(x) == Label.UNSAFE:
            status = RolloutStatus.ENTERED_UNSAFE
            break
        if not sys.contains(x):
            status = RolloutStatus.EXITED_DOMAIN
            break
        decision = filt.batch_decide(x[None, :])
        if not decision.feasible[0]:
            status = RolloutStatus.FILTER_INFEASIBLE
            break
        u = decision.inputs[0]
        actives.append(bool(decision.active[0]))
        slacks.append(float(decision.slack[0]))
        x = _wrap_angles(sys, rk4_step(sys, x, u, dt))
        states.append(x.copy())
        inputs.append(u)
        h_vals.append(float(forward_batch(filt.certificate, x[None, :])[0]))
    else:
        if sys.label(x) == Label.UNSAFE:
            status = RolloutStatus.ENTERED_UNSAFE
        elif not sys.contains(x):
            status = RolloutStatus.EXITED_DOMAIN
    return Rollout(
        states=np.asarray(states),
        inputs=np.asarray(inputs).reshape(len(inputs), sys.m),
        h_values=np.asarray(h_vals),
        filter_active=np.asarray(actives, dtype=bool),
        filter_slack=np.asarray(slacks),
        dt=dt,
        status=status,
    )


def sample_safe_starts(sys: ControlAffineSystem, count: int,
                       rng: np.random.Generator) -> np.ndarray:
    return rejection_sample_label(sys, Label.SAFE, count, rng)


def empirical_safety_rate(sys: ControlAffineSystem, filt: SafetyFilter,
                          n_rollouts: int, horizon_steps: int, dt: float,
                          seed: int) -> tuple[float, Counter, list[Rollout]]:
    """Fraction of rollouts from uniform safe starts that never fail.

    Unsafe entry and filter infeasibility always count as failures; domain
    exit counts as a failure only for systems that declare it so (the
    geofence benchmark), and as harmless truncation otherwise.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    starts = sample_safe_starts(sys, n_rollouts, np.random.default_rng([seed, 5]))
    counts: Counter = Counter()
    rollouts = []
    failures = 0
    for x0 in starts:
        ro = rollout(sys, filt, x0, horizon_steps, dt)
        counts[ro.status.value] += 1
        rollouts.append(ro)
        failed = ro.status in (RolloutStatus.ENTERED_UNSAFE,
                               RolloutStatus.FILTER_INFEASIBLE)
        if sys.domain_exit_unsafe and ro.status == RolloutStatus.EXITED_DOMAIN:
            failed = True
        failures += int(failed)
    return 1.0 - failures / n_rollouts, counts, rollouts


@dataclass(frozen=True)
class SliceSpec:
    """A 2-D slice through the state space for level-set extraction."""

    free_axes: tuple[int, int]
    fixed_values: tuple[float, ...]
    resolution: int

    def __post_init__(self) -> None:
        if len(self.free_axes) != 2 or self.free_axes[0] == self.free_axes[1]:
            raise ValueError("free_axes must be two distinct indices")
        if self.resolution < 2:
            raise ValueError("resolution must be at least 2")


def levelset_grid(cert: MlpCertificate, spec: SliceSpec, bounds
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Barrier values on a resolution x resolution grid over the slice.

    Returns (axis0_values, axis1_values, grid) with grid[i, j] the barrier
    at free_axes[0] = axis0_values[i], free_axes[1] = axis1_values[j].
    """
    bounds = np.asarray(bounds, dtype=float)
    n = bounds.shape[0]
    i0, i1 = spec.free_axes
    if not (0 <= i0 < n and 0 <= i1 < n):
        raise ValueError(f"free axes {spec.free_axes} outside state dimension {n}")
    if len(spec.fixed_values) != n:
        raise ValueError("fixed_values must list one value per state dimension")
    vals0 = np.linspace(bounds[i0, 0], bounds[i0, 1], spec.resolution)
    vals1 = np.linspace(bounds[i1, 0], bounds[i1, 1], spec.resolution)
    # evaluate node by node through the single-state path: BLAS batching
    # perturbs the last ulp, and grid values are contracted to be
    # bit-identical to a direct barrier evaluation at the node
    state = np.asarray(spec.fixed_values, dtype=float).copy()
    grid = np.empty((spec.resolution, spec.resolution))
    for i, v0 in enumerate(vals0):
        state[i0] = v0
        for j, v1 in enumerate(vals1):
            state[i1] = v1
            grid[i, j] = forward_batch(cert, state[None, :])[0]
    return vals0, vals1, grid


def rollout_to_csv(ro: Rollout, path) -> None:
    """t, state..., input..., h, constraint_active, constraint_slack;
    the final row has no input or filter columns."""
    path = Path(path)
    n = ro.states.shape[1]
    m = ro.inputs.shape[1] if ro.inputs.size else 0
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"x{i}" for i in range(n)]
                        + [f"u{i}" for i in range(m)]
                        + ["h", "constraint_active", "constraint_slack"])
        for k, (x, h) in enumerate(zip(ro.states, ro.h_values)):
            stepped = k < ro.inputs.shape[0]
            u = ro.inputs[k] if stepped else [""] * m
            tail = ([str(int(ro.filter_active[k])), repr(float(ro.filter_slack[k]))]
                    if stepped and k < ro.filter_active.size else ["", ""])
            writer.writerow([repr(k * ro.dt)] + [repr(float(v)) for v in x]
                            + [v if v == "" else repr(float(v)) for v in u]
                            + [repr(float(h))] + tail)


def levelset_to_csv(vals0, vals1, grid, path, sidecar: dict | None = None) -> None:
    """Row-major grid CSV with an axis header; optional JSON sidecar."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis0\\axis1"] + [repr(float(v)) for v in vals1])
        for v0, row in zip(vals0, grid):
            writer.writerow([repr(float(v0))] + [repr(float(v)) for v in row])
    if sidecar is not None:
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))

"""Training-set construction: i.i.d. uniform draws over the state box,
rejection sampling into labeled buckets, and the collision-cone labeler
used by the moving-obstacle benchmark.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import ControlAffineSystem, Label

_STALL_MIN_DRAWS = 200_000
_STALL_RATE = 1e-4


class LabelingMeasureError(RuntimeError):
    """Rejection sampling stalled: the requested label has (near-)zero measure."""


@dataclass(frozen=True)
class TrainingDatasets:
    """The three point sets the loss runs over: safe, unsafe, whole-space."""

    safe: np.ndarray     # (n_safe, n)
    unsafe: np.ndarray   # (n_unsafe, n)
    domain: np.ndarray   # (n_domain, n)
    seed: int

    def sizes(self) -> tuple[int, int, int]:
        return self.safe.shape[0], self.unsafe.shape[0], self.domain.shape[0]


def sample_uniform(bounds, count: int, seed) -> np.ndarray:
    """count points, each coordinate independent uniform over its interval.

    seed may be an int, a sequence of ints, or a Generator; fixed seeds
    reproduce exact sequences.
    """
    bounds = np.asarray(bounds, dtype=float)
    if bounds.ndim != 2 or bounds.shape[1] != 2 or np.any(bounds[:, 0] >= bounds[:, 1]):
        raise ValueError("bounds must be (n, 2) intervals with lo < hi")
    if count < 0:
        raise ValueError("count must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pts = rng.uniform(size=(count, bounds.shape[0]))
    return bounds[:, 0] + pts * (bounds[:, 1] - bounds[:, 0])


def rejection_sample_label(sys: ControlAffineSystem, want_label: int, count: int,
                           rng: np.random.Generator) -> np.ndarray:
    """Uniform draws over X kept only when the labeler matches; raises
    LabelingMeasureError when the acceptance rate collapses."""
    out = np.empty((count, sys.n))
    got = 0
    drawn = 0
    chunk = max(4096, 2 * count)
    while got < count:
        pts = sample_uniform(sys.state_bounds, chunk, rng)
        keep = pts[sys.label_batch(pts) == want_label]
        take = min(count - got, keep.shape[0])
        out[got:got + take] = keep[:take]
        got += take
        drawn += chunk
        if drawn >= _STALL_MIN_DRAWS and got / drawn < _STALL_RATE:
            raise LabelingMeasureError(
                f"acceptance rate {got / drawn:.2e} for label {Label(want_label).name} "
                f"after {drawn} draws; labeler looks degenerate"
            )
    return out


def build_datasets(sys: ControlAffineSystem, n_safe: int, n_unsafe: int,
                   n_domain: int, seed: int) -> TrainingDatasets:
    """Rejection-sample the safe and unsafe buckets to their exact targets;
    the domain bucket is unconditioned uniform over X."""
    if min(n_safe, n_unsafe, n_domain) <= 0:
        raise ValueError("all dataset sizes must be positive")
    safe = rejection_sample_label(sys, Label.SAFE, n_safe,
                                  np.random.default_rng([seed, 1]))
    unsafe = rejection_sample_label(sys, Label.UNSAFE, n_unsafe,
                                    np.random.default_rng([seed, 2]))
    domain = sample_uniform(sys.state_bounds, n_domain, np.random.default_rng([seed, 3]))
    return TrainingDatasets(safe=safe, unsafe=unsafe, domain=domain, seed=seed)


def collision_cone_label_batch(states, nominal_speed: float = 1.0,
                               margin: float = 0.2) -> np.ndarray:
    """Label moving-obstacle states by constant-velocity closest approach.

    Relative position p points from robot to obstacle; relative velocity
    assumes the robot holds its nominal forward speed. A state is unsafe
    when already inside the obstacle radius, or when closing and the
    straight-line miss distance is within the radius. It is safe when both
    clearances exceed radius + margin; the band between is left unlabeled.
    """
    pts = np.asarray(states, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 8:
        raise ValueError("collision-cone labeling expects (B, 8) states")
    p = pts[:, 3:5] - pts[:, 0:2]
    v_rel = np.stack([
        pts[:, 5] - nominal_speed * np.cos(pts[:, 2]),
        pts[:, 6] - nominal_speed * np.sin(pts[:, 2]),
    ], axis=1)
    r = pts[:, 7]
    dist = np.linalg.norm(p, axis=1)
    closing_rate = np.einsum("bi,bi->b", p, v_rel)
    approaching = closing_rate < 0.0
    speed_sq = np.einsum("bi,bi->b", v_rel, v_rel)
    # miss distance: |p x v| / |v| for approaching states with v != 0
    cross = p[:, 0] * v_rel[:, 1] - p[:, 1] * v_rel[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        miss = np.abs(cross) / np.sqrt(speed_sq)
    miss = np.where(speed_sq > 0.0, miss, np.inf)

    unsafe = (dist <= r) | (approaching & (miss <= r))
    safe = (dist >= r + margin) & (~approaching | (miss >= r + margin))
    out = np.zeros(pts.shape[0], dtype=int)
    out[safe] = Label.SAFE
    out[unsafe] = Label.UNSAFE
    return out


def collision_cone_label(state, nominal_speed: float = 1.0, margin: float = 0.2) -> Label:
    return Label(int(collision_cone_label_batch(
        np.asarray(state, float)[None, :], nominal_speed, margin)[0]))


def datasets_to_csv(datasets: TrainingDatasets, path) -> None:
    """One state per row, with a bucket column."""
    path = Path(path)
    n = datasets.safe.shape[1]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(n)] + ["bucket"])
        for bucket, pts in (("safe", datasets.safe),
                            ("unsafe", datasets.unsafe),
                            ("domain", datasets.domain)):
            for row in pts:
                writer.writerow([repr(float(v)) for v in row] + [bucket])

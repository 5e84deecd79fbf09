"""Iterative training with conformal refinement.

Phase 0 trains the barrier network with zero robustness margin. Each
round then draws fresh verification samples, computes the conformal
quantile of the violation scores, and either stops (quantile <= 0, the
certificate holds at the requested confidence) or tightens the margin and
retrains. On budget exhaustion the certificate with the best quantile
seen is returned.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import mlp
from .certificate import (ConformalReport, InvalidAlphaError, LossWeights,
                          epsilon_for, quantile_index, quantify_safety,
                          total_loss, total_loss_and_gradient)
from .controller import SafetyFilter
from .dynamics import ControlAffineSystem, make_system
from .sampling import TrainingDatasets, build_datasets

STATUS_CERTIFIED = "certified"
STATUS_BUDGET_EXHAUSTED = "budget_exhausted"


class DivergedTrainingError(RuntimeError):
    """The loss became non-finite; carries the epoch index."""

    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs; defaults mirror the benchmark
    hyperparameters at desk scale."""

    system: str = "dubins"
    system_params: dict = field(default_factory=dict)
    hidden_layers: tuple[int, ...] = (64,)
    epochs: int = 300
    batch_size: int = 256
    learning_rate: float = 1e-3
    n_safe: int = 6700
    n_unsafe: int = 6700
    n_domain: int = 6600
    lambda1: float = 1.0
    lambda2: float = 0.1
    delta: float = 0.01
    kappa_gain: float = 1.0
    conformal_samples: int = 20000
    alpha: float = 0.0075
    beta: float = 1e-3
    max_refinements: int = 3
    loss_tolerance: float = 1e-6
    seed: int = 0
    psi_update: str = "cumulative"        # or "reset"
    respect_input_bounds_training: bool = False
    correction_cap: float | None = 1e3

    def validate(self) -> list[str]:
        """Field-path error messages; empty when the config is usable."""
        errors = []
        if self.system not in _known_systems():
            errors.append(f"system: unknown {self.system!r}")
        if not self.hidden_layers or any(int(h) <= 0 for h in self.hidden_layers):
            errors.append("hidden_layers: need at least one positive layer width")
        for name in ("epochs", "batch_size", "n_safe", "n_unsafe", "n_domain",
                     "conformal_samples", "max_refinements"):
            if int(getattr(self, name)) <= 0:
                errors.append(f"{name}: must be positive")
        for name in ("learning_rate", "lambda1", "lambda2", "delta", "kappa_gain"):
            if float(getattr(self, name)) <= 0:
                errors.append(f"{name}: must be positive")
        if self.loss_tolerance < 0:
            errors.append("loss_tolerance: must be non-negative")
        if not (0.0 < self.alpha < 1.0):
            errors.append("alpha: must lie in (0, 1)")
        if not (0.0 < self.beta < 1.0):
            errors.append("beta: must lie in (0, 1)")
        if not errors:
            l = quantile_index(self.conformal_samples, self.alpha)
            if l < 1 or l > self.conformal_samples:
                errors.append(
                    "alpha: floor((N+1) alpha) = "
                    f"{l} outside [1, N] for N={self.conformal_samples}"
                )
        if self.psi_update not in ("cumulative", "reset"):
            errors.append("psi_update: must be 'cumulative' or 'reset'")
        return errors

    def loss_weights(self, psi: float = 0.0) -> LossWeights:
        return LossWeights(lambda1=self.lambda1, lambda2=self.lambda2,
                           delta=self.delta, psi=psi, kappa_gain=self.kappa_gain)

    def build_system(self) -> ControlAffineSystem:
        return make_system(self.system, **self.system_params)

    def layer_sizes(self, n: int) -> tuple[int, ...]:
        return (n, *[int(h) for h in self.hidden_layers], 1)

    def to_dict(self) -> dict:
        doc = {
            "system": self.system,
            "system_params": dict(self.system_params),
            "hidden_layers": list(self.hidden_layers),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "n_safe": self.n_safe,
            "n_unsafe": self.n_unsafe,
            "n_domain": self.n_domain,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "delta": self.delta,
            "kappa_gain": self.kappa_gain,
            "conformal_samples": self.conformal_samples,
            "alpha": self.alpha,
            "beta": self.beta,
            "max_refinements": self.max_refinements,
            "loss_tolerance": self.loss_tolerance,
            "seed": self.seed,
            "psi_update": self.psi_update,
            "respect_input_bounds_training": self.respect_input_bounds_training,
            "correction_cap": self.correction_cap,
        }
        return doc

    _INT_FIELDS = ("epochs", "batch_size", "n_safe", "n_unsafe", "n_domain",
                   "conformal_samples", "max_refinements", "seed")
    _FLOAT_FIELDS = ("learning_rate", "lambda1", "lambda2", "delta",
                     "kappa_gain", "alpha", "beta", "loss_tolerance")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        kwargs = dict(doc)
        if "hidden_layers" in kwargs:
            kwargs["hidden_layers"] = tuple(int(h) for h in kwargs["hidden_layers"])
        for name in cls._INT_FIELDS:
            if name in kwargs:
                value = kwargs[name]
                if isinstance(value, bool) or int(value) != value:
                    raise ValueError(f"{name}: expected an integer, got {value!r}")
                kwargs[name] = int(value)
        for name in cls._FLOAT_FIELDS:
            if name in kwargs:
                kwargs[name] = float(kwargs[name])
        unknown = set(kwargs) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs)


def _known_systems():
    from .dynamics import _BUILDERS

    return _BUILDERS


@dataclass
class RefinementRecord:
    psi: float
    quantile: float
    epsilon: float
    beta: float

    def to_dict(self) -> dict:
        return {"psi": self.psi, "quantile": self.quantile,
                "epsilon": self.epsilon, "beta": self.beta}


@dataclass
class TrainingHistory:
    epoch_losses: list[list[float]] = field(default_factory=list)
    refinements: list[RefinementRecord] = field(default_factory=list)
    phase_seconds: list[float] = field(default_factory=list)
    status: str = STATUS_BUDGET_EXHAUSTED

    def to_dict(self) -> dict:
        return {
            "epoch_losses": self.epoch_losses,
            "refinements": [r.to_dict() for r in self.refinements],
            "phase_seconds": self.phase_seconds,
            "status": self.status,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _training_filter(cert, sys, config: TrainConfig) -> SafetyFilter:
    return SafetyFilter(
        certificate=cert, system=sys, kappa_gain=config.kappa_gain,
        respect_input_bounds=config.respect_input_bounds_training,
        correction_cap=config.correction_cap,
    )


def _batch_slices(total: int, n_batches: int):
    cuts = np.linspace(0, total, n_batches + 1).astype(int)
    return [(cuts[i], cuts[i + 1]) for i in range(n_batches)]


def train_phase(cert: mlp.MlpCertificate, datasets: TrainingDatasets,
                weights: LossWeights, config: TrainConfig,
                sys: ControlAffineSystem, rng: np.random.Generator
                ) -> tuple[mlp.MlpCertificate, list[float]]:
    """Mini-batch descent on the composite loss until it drops below the
    tolerance or the epoch budget runs out. The safety filter feeding the
    decrease term is rebuilt from the current parameters at every batch.
    Returns the best certificate seen (lowest full-dataset loss)."""
    losses = [total_loss(cert, datasets, _training_filter(cert, sys, config), weights)]
    if not np.isfinite(losses[0]):
        raise DivergedTrainingError(0)
    best_loss, best_cert = losses[0], cert
    if best_loss <= config.loss_tolerance:
        return cert, losses
    state = mlp.init_adam(cert, learning_rate=config.learning_rate)
    ns, nu, nd = datasets.sizes()
    n_batches = max(1, int(np.ceil(max(ns, nu, nd) / config.batch_size)))
    for epoch in range(1, config.epochs + 1):
        order_s = rng.permutation(ns)
        order_u = rng.permutation(nu)
        order_d = rng.permutation(nd)
        s_cuts = _batch_slices(ns, n_batches)
        u_cuts = _batch_slices(nu, n_batches)
        d_cuts = _batch_slices(nd, n_batches)
        for (s0, s1), (u0, u1), (d0, d1) in zip(s_cuts, u_cuts, d_cuts):
            if s1 == s0 or u1 == u0 or d1 == d0:
                continue
            batch = TrainingDatasets(
                safe=datasets.safe[order_s[s0:s1]],
                unsafe=datasets.unsafe[order_u[u0:u1]],
                domain=datasets.domain[order_d[d0:d1]],
                seed=datasets.seed,
            )
            filt = _training_filter(cert, sys, config)
            _, grads = total_loss_and_gradient(cert, batch, filt, weights)
            state, cert = mlp.adam_step(state, cert, grads)
        loss = total_loss(cert, datasets, _training_filter(cert, sys, config), weights)
        if not np.isfinite(loss):
            raise DivergedTrainingError(epoch)
        losses.append(loss)
        if loss < best_loss:
            best_loss, best_cert = loss, cert
        if loss <= config.loss_tolerance:
            break
    return best_cert, losses


def refine(config: TrainConfig,
           on_phase: Callable[[int, mlp.MlpCertificate], None] | None = None
           ) -> tuple[mlp.MlpCertificate, TrainingHistory, ConformalReport]:
    """Run the full train / certify / tighten loop.

    Returns the final certificate, the history, and the conformal report
    that decided the final status. With status budget_exhausted, the
    certificate (and report) with the smallest quantile is returned.
    """
    errors = config.validate()
    if errors:
        raise ValueError("invalid config: " + "; ".join(errors))
    sys = config.build_system()
    datasets = build_datasets(sys, config.n_safe, config.n_unsafe, config.n_domain,
                              seed=config.seed)
    cert = mlp.init_certificate(config.layer_sizes(sys.n), seed=config.seed)
    history = TrainingHistory()
    psi = 0.0
    best: tuple[float, mlp.MlpCertificate, ConformalReport] | None = None
    for round_idx in range(config.max_refinements + 1):
        weights = config.loss_weights(psi=psi)
        rng = np.random.default_rng([config.seed, 101, round_idx])
        started = time.perf_counter()
        cert, losses = train_phase(cert, datasets, weights, config, sys, rng)
        history.phase_seconds.append(time.perf_counter() - started)
        history.epoch_losses.append(losses)
        if on_phase is not None:
            on_phase(round_idx, cert)
        verifier = SafetyFilter(
            certificate=cert, system=sys, kappa_gain=config.kappa_gain,
            respect_input_bounds=config.respect_input_bounds_training,
        )
        report = quantify_safety(
            cert, sys, verifier, config.conformal_samples, config.alpha,
            config.beta, seed=int(np.random.default_rng(
                [config.seed, 211, round_idx]).integers(2**31)),
            weights=weights,
        )
        history.refinements.append(RefinementRecord(
            psi=psi, quantile=report.quantile, epsilon=report.epsilon,
            beta=report.beta,
        ))
        if best is None or report.quantile < best[0]:
            best = (report.quantile, cert, report)
        if report.quantile <= 0.0:
            history.status = STATUS_CERTIFIED
            return cert, history, report
        if config.psi_update == "cumulative":
            psi = psi - max(report.quantile, 0.0)
        else:
            psi = -report.quantile
    history.status = STATUS_BUDGET_EXHAUSTED
    _, best_cert, best_report = best
    return best_cert, history, best_report


def alpha_epsilon_curve(n_samples: int, beta: float, alphas) -> list[dict]:
    """Pointwise epsilon evaluations; invalid alphas are recorded, not fatal."""
    rows = []
    for alpha in alphas:
        row = {"n_samples": n_samples, "beta": beta, "alpha": float(alpha)}
        try:
            row["epsilon"] = epsilon_for(n_samples, float(alpha), beta)
            row["error"] = None
        except (InvalidAlphaError, ValueError) as exc:
            row["epsilon"] = None
            row["error"] = str(exc)
        rows.append(row)
    return rows

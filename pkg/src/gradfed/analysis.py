"""Post-hoc numerical verification of the convergence theory.

Computes the stationarity bound

    mean_t ||grad f(w^t)||^2  <=  (f(w^0) - f*) / ((T+1) eta mu)
                                  + R_bar / mu
                                  + (L / (2 mu)) eta G^2

and checks recorded trajectories against it, audits the largest-step
identity of single-client gradient-norm selection, provides the central
finite-difference gradient used to validate backpropagation, and scores
partition heterogeneity.

The bound comparison is a strict theorem check only on the convex
linear-softmax task in the unbiased regime (full participation, full
batches, exact data-weighted averaging), where mu = 1 and the residual
vanishes; elsewhere it is reported as informational.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .datasets import ClientShard, Dataset
from .federation import RoundRecord
from .nn import Batch, MlpArchitecture


@dataclass(frozen=True)
class ConvergenceConstants:
    """Inputs of the stationarity bound."""

    f0: float
    f_star: float
    eta: float
    mu: float
    L: float
    G: float
    r_bar: float
    t_plus_1: int

    def __post_init__(self):
        values = (self.f0, self.f_star, self.eta, self.mu, self.L, self.G, self.r_bar)
        if not all(math.isfinite(v) for v in values):
            raise ValueError("all constants must be finite")
        if min(self.eta, self.mu, self.L, self.G) <= 0:
            raise ValueError("eta, mu, L and G must be positive")
        if self.t_plus_1 < 1:
            raise ValueError("t_plus_1 must be >= 1")


def proposition1_bound(c: ConvergenceConstants) -> float:
    """Upper bound on the mean squared full-gradient norm over a run."""
    return (
        (c.f0 - c.f_star) / (c.t_plus_1 * c.eta * c.mu)
        + c.r_bar / c.mu
        + (c.L / (2.0 * c.mu)) * c.eta * c.G**2
    )


@dataclass(frozen=True)
class TrajectoryStats:
    """Full-objective gradient magnitudes along recorded iterates."""

    rounds: tuple[int, ...]
    grad_sq_norms: tuple[float, ...]

    def __post_init__(self):
        if len(self.rounds) != len(self.grad_sq_norms):
            raise ValueError("one squared norm per round is required")
        if any(v < 0 for v in self.grad_sq_norms):
            raise ValueError("squared norms cannot be negative")

    @property
    def mean(self) -> float:
        return float(np.mean(self.grad_sq_norms))

    @property
    def min(self) -> float:
        return float(np.min(self.grad_sq_norms))


@dataclass(frozen=True)
class TrajectoryAudit:
    stats: TrajectoryStats
    constants: ConvergenceConstants | None
    bound: float | None
    mean_within_bound: bool | None
    informational: bool


def full_gradient(
    arch: MlpArchitecture, w: np.ndarray, ds: Dataset, chunk_size: int = 4096
) -> np.ndarray:
    """Gradient of the mean loss over the whole dataset.

    Chunks are recombined with sample-count weights, which reproduces the
    single-batch gradient exactly up to float rounding.
    """
    n = len(ds)
    total = np.zeros(nn.param_count(arch))
    for start in range(0, n, chunk_size):
        stop = min(start + chunk_size, n)
        batch = Batch(inputs=ds.inputs[start:stop], labels=ds.labels[start:stop])
        _, grad = nn.backward(arch, w, batch)
        total += (stop - start) * grad
    return total / n


def full_gradient_by_shards(
    arch: MlpArchitecture,
    w: np.ndarray,
    ds: Dataset,
    shards: Sequence[ClientShard],
) -> np.ndarray:
    """Full-dataset gradient as the size-weighted mean of shard gradients.

    Since the shards partition the dataset, this equals `full_gradient`
    up to rounding; the reduction runs in ascending client order so the
    result is reproducible.
    """
    n = sum(len(shard) for shard in shards)
    total = np.zeros(nn.param_count(arch))
    for shard in sorted(shards, key=lambda s: s.client_id):
        batch = Batch(inputs=ds.inputs[shard.indices], labels=ds.labels[shard.indices])
        _, grad = nn.backward(arch, w, batch)
        total += len(shard) * grad
    return total / n


def full_loss(arch: MlpArchitecture, w: np.ndarray, ds: Dataset, chunk_size: int = 4096) -> float:
    """Mean loss over the whole dataset."""
    n = len(ds)
    loss_sum = 0.0
    for start in range(0, n, chunk_size):
        stop = min(start + chunk_size, n)
        batch = Batch(inputs=ds.inputs[start:stop], labels=ds.labels[start:stop])
        loss_sum += nn.forward_loss(arch, w, batch) * (stop - start)
    return loss_sum / n


def analytic_smoothness_bound(ds: Dataset) -> float:
    """Smoothness constant of the linear softmax model on this data.

    The per-logit Hessian of the softmax cross-entropy has spectral norm
    at most 1/2, so the mean loss over n bias-augmented inputs X is
    L-smooth with L = sigma_max(X)^2 / (2n).
    """
    augmented = np.hstack([ds.inputs, np.ones((len(ds), 1))])
    top_singular = np.linalg.svd(augmented, compute_uv=False)[0]
    return float(top_singular**2 / (2.0 * len(ds)))


def empirical_gradient_bound(records: Sequence[RoundRecord]) -> float:
    """Largest client stochastic-gradient norm observed in a run."""
    if not records:
        raise ValueError("no records")
    return max(r.max_grad_norm for r in records)


def audit_trajectory(
    records: Sequence[RoundRecord],
    shards: Sequence[ClientShard],
    ds: Dataset,
    arch: MlpArchitecture,
    checkpoints: Sequence[tuple[int, np.ndarray]],
    eta: float,
    f_star: float = 0.0,
    mu: float = 1.0,
    r_bar: float = 0.0,
    assume_unbiased: bool = False,
) -> TrajectoryAudit:
    """Measure full-gradient decay along a run and compare to the bound.

    Checkpoints are pre-update iterates w^t; those with t < len(records)
    enter the statistics (w^0 must be present). G comes from the recorded
    per-client norms, L analytically from the data when the model is
    linear. For hidden-layer models no smoothness constant is claimed and
    the result carries stats only.
    """
    iterates = [(t, w) for t, w in checkpoints if t < len(records)]
    if not iterates or iterates[0][0] != 0:
        raise ValueError("checkpoints must start at round 0 and cover the run")
    rounds = tuple(t for t, _ in iterates)
    sq_norms = tuple(
        float(np.dot(g, g))
        for g in (full_gradient_by_shards(arch, w, ds, shards) for _, w in iterates)
    )
    stats = TrajectoryStats(rounds=rounds, grad_sq_norms=sq_norms)

    if arch.hidden_dims:
        return TrajectoryAudit(
            stats=stats, constants=None, bound=None, mean_within_bound=None, informational=True
        )
    constants = ConvergenceConstants(
        f0=full_loss(arch, iterates[0][1], ds),
        f_star=f_star,
        eta=eta,
        mu=mu,
        L=analytic_smoothness_bound(ds),
        G=empirical_gradient_bound(records),
        r_bar=r_bar,
        t_plus_1=len(records),
    )
    bound = proposition1_bound(constants)
    return TrajectoryAudit(
        stats=stats,
        constants=constants,
        bound=bound,
        mean_within_bound=stats.mean <= bound,
        informational=not assume_unbiased,
    )


@dataclass(frozen=True)
class Lemma1Report:
    """Outcome of the largest-step identity check."""

    checked_rounds: int
    violations: tuple[int, ...]

    @property
    def passed(self) -> bool:
        return not self.violations


def lemma1_audit(
    records: Sequence[RoundRecord], eta: float, rel_tol: float = 1e-9
) -> Lemma1Report:
    """Verify ||w^{t+1} - w^t|| = eta * max_k ||g_k|| on every round.

    Meaningful for single-client gradient-norm selection, where the step
    taken is exactly the largest client gradient scaled by eta. Returns
    the list of violating round numbers instead of raising.
    """
    violations = []
    for record in records:
        expected = eta * record.max_grad_norm
        if abs(record.step_norm - expected) > rel_tol * max(abs(expected), 1e-300):
            violations.append(record.round)
    return Lemma1Report(checked_rounds=len(records), violations=tuple(violations))


def finite_difference_gradient(
    arch: MlpArchitecture, w: np.ndarray, batch: Batch, step: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of the loss, one coordinate at a time.

    The independent oracle for backpropagation; O(step^2) accurate and
    O(d) forward passes slow, so keep architectures small.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    w = np.asarray(w, dtype=np.float64)
    grad = np.empty_like(w)
    probe = w.copy()
    for i in range(len(w)):
        original = probe[i]
        probe[i] = original + step
        up = nn.forward_loss(arch, probe, batch)
        probe[i] = original - step
        down = nn.forward_loss(arch, probe, batch)
        probe[i] = original
        grad[i] = (up - down) / (2.0 * step)
    return grad


def heterogeneity_score(shards: Sequence[ClientShard], ds: Dataset) -> float:
    """Mean over clients of the L1 gap to the global label distribution.

    0 when every client mirrors the global mix; approaches 2 as clients
    become single-class on rare labels.
    """
    global_dist = ds.label_distribution()
    gaps = [
        float(np.abs(ds.label_distribution(shard.indices) - global_dist).sum())
        for shard in shards
    ]
    return float(np.mean(gaps))


def log_log_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log y against log x."""
    if len(xs) != len(ys) or len(xs) < 2:
        raise ValueError("need at least two (x, y) points")
    if min(xs) <= 0 or min(ys) <= 0:
        raise ValueError("log-log fit requires positive values")
    return float(np.polyfit(np.log(np.asarray(xs)), np.log(np.asarray(ys)), 1)[0])

"""Synchronous TD policy evaluation over a stacked d x N value matrix.

Three update rules share one sample batch per sweep:

* ``tsvd_td_step``: bootstrap from the rank-k truncation of the current iterate,
* ``vanilla_td_step``: independent tabular TD per task,
* ``feature_td_step``: linear TD on a frozen orthonormal feature matrix.

Value matrices are plain ``(d, N)`` float arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import GroundTruth, MultiTaskMdp, SampleBatch, rng_for, INIT_STREAM
from .linalg import project_rank_k


class DivergenceError(RuntimeError):
    """Raised when an iterate becomes non-finite or blows past the divergence guard."""

    def __init__(self, message: str, trial: int | None = None, iteration: int | None = None):
        super().__init__(message)
        self.trial = trial
        self.iteration = iteration


@dataclass(frozen=True)
class StepSchedule:
    kind: str = "simple"  # "theory" or "simple"
    alpha0: float = 1.0

    def __post_init__(self):
        if self.kind not in ("theory", "simple"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.alpha0 > 0:
            raise ValueError(f"alpha0 must be positive, got {self.alpha0}")

    @classmethod
    def theory(cls, gamma: float) -> "StepSchedule":
        return cls("theory", 1.0 / (1.0 - gamma))


def step_size(t: int, sched: StepSchedule) -> float:
    if t < 0:
        raise ValueError(f"iteration index must be >= 0, got {t}")
    if sched.kind == "theory":
        return sched.alpha0 / (t + sched.alpha0)
    return 1.0 / (t + 1)


@dataclass
class FeatureModel:
    features: np.ndarray  # d x k, orthonormal columns, frozen
    weights: np.ndarray  # k x N

    @property
    def values(self) -> np.ndarray:
        return self.features @ self.weights


@dataclass(frozen=True)
class DiagnosticRecord:
    noise_norm_sq: float
    noise_bound: float
    step: float


def noise_bound(d: int, N: int, gamma: float) -> float:
    """The constant 16 N^2 d / (1 - gamma)^2 bounding the expected squared noise."""
    return 16.0 * N * N * d / (1.0 - gamma) ** 2


def _td_update(V, target_values, batch: SampleBatch, gamma: float, alpha: float):
    out = V + alpha * (batch.reward + gamma * target_values[batch.next_state] - V)
    if not np.all(np.isfinite(out)):
        raise DivergenceError("non-finite value after TD update")
    return out


def _check_k(k: int, N: int) -> None:
    if not 1 <= k <= N:
        raise ValueError(f"truncation rank k={k} outside [1, {N}]")


def tsvd_td_step(V, batch: SampleBatch, mdp: MultiTaskMdp, k: int, alpha: float):
    """One sweep of truncated-SVD TD.

    The bootstrap target for every (state, task) reads column ``i`` of the
    rank-``k`` projection of the whole pre-step matrix, evaluated at the sampled
    successor. The projection is computed once per sweep.
    """
    V = np.asarray(V, dtype=float)
    _check_k(k, V.shape[1])
    G = project_rank_k(V, k)
    return _td_update(V, G, batch, mdp.discount, alpha)


def vanilla_td_step(V, batch: SampleBatch, mdp: MultiTaskMdp, alpha: float):
    V = np.asarray(V, dtype=float)
    return _td_update(V, V, batch, mdp.discount, alpha)


def feature_td_step(
    model: FeatureModel, batch: SampleBatch, mdp: MultiTaskMdp, alpha: float
) -> FeatureModel:
    U = model.features
    approx = U @ model.weights
    delta = batch.reward + mdp.discount * approx[batch.next_state] - approx
    weights = model.weights + alpha * (U.T @ delta)
    if not np.all(np.isfinite(weights)):
        raise DivergenceError("non-finite weights after feature TD update")
    return FeatureModel(features=U, weights=weights)


def init_feature_model(features, V0) -> FeatureModel:
    """Start from the least-squares fit ``W0 = U^T V0`` of the tabular initialization."""
    features = np.asarray(features, dtype=float)
    return FeatureModel(features=features, weights=features.T @ np.asarray(V0, dtype=float))


def noise_matrix(G, batch: SampleBatch, mdp: MultiTaskMdp):
    """Sampling error ``(R_t - R) + gamma (G[s'] - P G)`` for bootstrap matrix ``G``."""
    sampled = G[batch.next_state]
    expected = mdp.transition @ G
    return (batch.reward - mdp.expected_reward) + mdp.discount * (sampled - expected)


def noise_term(V, batch: SampleBatch, mdp: MultiTaskMdp, k: int, alpha: float = float("nan")):
    """Squared Frobenius norm of the sampling noise in the matrix-form update."""
    V = np.asarray(V, dtype=float)
    _check_k(k, V.shape[1])
    w = noise_matrix(project_rank_k(V, k), batch, mdp)
    d, N = V.shape
    return DiagnosticRecord(
        noise_norm_sq=float(np.sum(w * w)),
        noise_bound=noise_bound(d, N, mdp.discount),
        step=alpha,
    )


def decompose_matrix_step(V, batch: SampleBatch, mdp: MultiTaskMdp, k: int, alpha: float):
    """Rebuild the TSVD sweep from its drift/noise/reward split.

    Returns ``(reconstructed, residual)`` where ``reconstructed`` is
    ``(1 - a) V + a gamma P G + a w + a R`` with ``G`` the rank-k projection,
    and ``residual`` is its Frobenius distance to ``tsvd_td_step``.
    """
    V = np.asarray(V, dtype=float)
    G = project_rank_k(V, k)
    w = noise_matrix(G, batch, mdp)
    rebuilt = (
        (1.0 - alpha) * V
        + alpha * mdp.discount * (mdp.transition @ G)
        + alpha * w
        + alpha * mdp.expected_reward
    )
    direct = tsvd_td_step(V, batch, mdp, k, alpha)
    return rebuilt, float(np.linalg.norm(rebuilt - direct))


def initialize_value(gt: GroundTruth, d: int, N: int, seed: int, trial: int = 0):
    """Gaussian initialization scaled by the largest singular value of V_*."""
    rng = rng_for(seed, INIT_STREAM, trial)
    return gt.top_singular_value * rng.standard_normal((d, N))

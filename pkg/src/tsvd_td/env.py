"""Synthetic multi-task Markov reward processes with a shared transition kernel.

Randomness: every stream is a numpy ``Generator`` (PCG64) seeded through
``SeedSequence`` from a tuple of nonnegative integers. ``rng_for(seed, tag,
...)`` is the single entry point, so a (seed, stream tag, trial, iteration)
tuple always maps to the same draws regardless of the order in which trials
or iterations are executed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .linalg import (
    SubspaceComplement,
    TruncatedSvd,
    empty_complement,
    misalignment,
    row_space_complement,
    truncated_svd,
)

MDP_STREAM = 0
INIT_STREAM = 1
SAMPLE_STREAM = 2

_SEED_MAX = 2**64 - 1


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    if not 0 <= seed <= _SEED_MAX:
        raise ValueError(f"seed must be in [0, 2**64), got {seed}")
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def mix_seed(seed: int, *keys: int) -> int:
    """Derive a new 64-bit seed from ``seed`` and integer keys."""
    state = np.random.SeedSequence([seed, *keys]).generate_state(1, dtype=np.uint64)
    return int(state[0])


@dataclass(frozen=True)
class MultiTaskMdp:
    transition: np.ndarray  # d x d, row-stochastic
    expected_reward: np.ndarray  # d x N
    discount: float
    rank: int
    state_factor: np.ndarray  # d x r
    task_factor: np.ndarray  # r x N
    seed: int = 0
    _cdf: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        cdf = np.cumsum(self.transition, axis=1)
        object.__setattr__(self, "_cdf", cdf)

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_tasks(self) -> int:
        return self.expected_reward.shape[1]

    @property
    def successor_cdf(self) -> np.ndarray:
        return self._cdf


@dataclass(frozen=True)
class GroundTruth:
    value: np.ndarray  # V_*, d x N
    svd: TruncatedSvd  # rank-r factors of value
    complement: SubspaceComplement
    top_singular_value: float


@dataclass(frozen=True)
class SampleBatch:
    next_state: np.ndarray  # length d, one successor per state shared by all tasks
    reward: np.ndarray  # d x N realized rewards


def _check_discount(gamma: float) -> None:
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"discount gamma={gamma} outside [0, 1)")


def generate_mdp(d: int, N: int, r: int, gamma: float, seed: int) -> MultiTaskMdp:
    """Random rank-``r`` multi-task MDP.

    Rewards are ``Phi @ mu`` divided by its largest entry (``Phi``, ``mu``
    standard normal), so entries can be negative. Transition rows are
    ``|Z|`` normalized to sum to one.
    """
    if d < 1 or N < 1:
        raise ValueError(f"need d >= 1 and N >= 1, got d={d}, N={N}")
    if not 1 <= r <= min(d, N):
        raise ValueError(f"rank r={r} outside [1, min(d, N)] = [1, {min(d, N)}]")
    _check_discount(gamma)
    rng = rng_for(seed, MDP_STREAM)
    phi = rng.standard_normal((d, r))
    mu = rng.standard_normal((r, N))
    raw = phi @ mu
    peak = raw.max()
    if not peak > 0:
        raise ValueError("degenerate reward draw (non-positive maximum); choose another seed")
    reward = raw / peak
    P = np.abs(rng.standard_normal((d, d)))
    P /= P.sum(axis=1, keepdims=True)
    return MultiTaskMdp(
        transition=P,
        expected_reward=reward,
        discount=float(gamma),
        rank=r,
        state_factor=phi,
        task_factor=mu,
        seed=seed,
    )


def solve_values(transition, reward, gamma: float) -> np.ndarray:
    """Solve ``(I - gamma P) V = R`` for all reward columns at once."""
    _check_discount(gamma)
    P = np.asarray(transition, dtype=float)
    R = np.asarray(reward, dtype=float)
    A = np.eye(P.shape[0]) - gamma * P
    try:
        V = scipy.linalg.solve(A, R, check_finite=True)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise np.linalg.LinAlgError(f"Bellman system solve failed: {exc}") from exc
    resid = np.linalg.norm(A @ V - R)
    scale = np.linalg.norm(R)
    if not np.all(np.isfinite(V)) or resid > 1e-8 * scale:
        raise np.linalg.LinAlgError(
            f"Bellman solve residual {resid:.3e} exceeds 1e-8 * ||R||_F = {1e-8 * scale:.3e}"
        )
    return V


def exact_value(mdp: MultiTaskMdp) -> GroundTruth:
    V = solve_values(mdp.transition, mdp.expected_reward, mdp.discount)
    N = V.shape[1]
    r = mdp.rank
    svd = truncated_svd(V, r)
    if r >= N:
        comp = empty_complement(N)
    else:
        comp = row_space_complement(V, r)
    top = float(truncated_svd(V, 1).singular_values[0])
    return GroundTruth(value=V, svd=svd, complement=comp, top_singular_value=top)


def row_space_residual(mdp: MultiTaskMdp, gt: GroundTruth) -> float:
    """``||R H_perp H_perp^T||_F / ||R||_F``; zero when rewards share V_*'s row space."""
    R = mdp.expected_reward
    norm = np.linalg.norm(R)
    if norm == 0:
        return 0.0
    return float(np.sqrt(misalignment(R, gt.complement)) / norm)


def sample_batch(
    mdp: MultiTaskMdp, noise_halfwidth: float, rng: np.random.Generator
) -> SampleBatch:
    """One synchronous sweep of samples: a successor per state and a reward per entry.

    Successors are drawn by inverse CDF over each transition row. Reward
    noise is Uniform(-beta, beta), added only when ``noise_halfwidth > 0``.
    """
    if noise_halfwidth < 0:
        raise ValueError(f"noise half-width must be >= 0, got {noise_halfwidth}")
    cdf = mdp.successor_cdf
    d = cdf.shape[0]
    u = rng.random(d)
    nxt = np.count_nonzero(cdf <= u[:, None], axis=1)
    # cumsum may end slightly below 1
    np.minimum(nxt, d - 1, out=nxt)
    if noise_halfwidth > 0:
        reward = mdp.expected_reward + rng.uniform(
            -noise_halfwidth, noise_halfwidth, size=mdp.expected_reward.shape
        )
    else:
        reward = mdp.expected_reward
    return SampleBatch(next_state=nxt, reward=reward)


# Snapshot layout: one ASCII header line, then little-endian float64 blocks in
# row-major order: transition (d*d), expected_reward (d*N), state_factor (d*r),
# task_factor (r*N).
_MAGIC = "TSVDMDP1"


def save_mdp(mdp: MultiTaskMdp, path) -> None:
    d, N, r = mdp.num_states, mdp.num_tasks, mdp.rank
    header = f"{_MAGIC} d={d} N={N} r={r} gamma={mdp.discount!r} seed={mdp.seed}\n"
    chunks = [header.encode("ascii")]
    for arr in (mdp.transition, mdp.expected_reward, mdp.state_factor, mdp.task_factor):
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_mdp(path) -> MultiTaskMdp:
    raw = Path(path).read_bytes()
    end = raw.index(b"\n")
    fields = raw[:end].decode("ascii").split()
    if not fields or fields[0] != _MAGIC:
        raise ValueError(f"{path}: not an MDP snapshot")
    meta = dict(f.split("=", 1) for f in fields[1:])
    d, N, r = int(meta["d"]), int(meta["N"]), int(meta["r"])
    gamma, seed = float(meta["gamma"]), int(meta["seed"])
    body = np.frombuffer(raw[end + 1 :], dtype="<f8")
    sizes = [d * d, d * N, d * r, r * N]
    if body.size != sum(sizes):
        raise ValueError(f"{path}: expected {sum(sizes)} values, found {body.size}")
    parts = np.split(body, np.cumsum(sizes)[:-1])
    shapes = [(d, d), (d, N), (d, r), (r, N)]
    P, R, phi, mu = (p.reshape(s).astype(float) for p, s in zip(parts, shapes))
    return MultiTaskMdp(
        transition=P,
        expected_reward=R,
        discount=gamma,
        rank=r,
        state_factor=phi,
        task_factor=mu,
        seed=seed,
    )

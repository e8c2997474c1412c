"""Convergence runs, rank sweeps and empirical checks of the rate bounds.

All trials run in lockstep: at iteration ``t`` every trial draws its batch
from ``rng_for(seed, SAMPLE_STREAM, trial, t)`` and every algorithm in that
trial consumes the same batch. Per-trial metrics are stored in arrays indexed
by trial and reduced in index order, so results do not depend on scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .config import Config
from .env import (
    SAMPLE_STREAM,
    GroundTruth,
    MultiTaskMdp,
    exact_value,
    generate_mdp,
    mix_seed,
    rng_for,
    row_space_residual,
    sample_batch,
)
from .learner import (
    DivergenceError,
    StepSchedule,
    noise_matrix,
    _td_update,
    feature_td_step,
    init_feature_model,
    initialize_value,
    noise_bound,
    step_size,
)
from .linalg import project_rank_k, truncated_svd

# Abort when ||V_t||_F exceeds this multiple of ||V_*||_F.
DIVERGENCE_FACTOR = 1e6


@dataclass(frozen=True)
class RunRecord:
    iteration: int
    mse: float
    misalignment: float
    noise_norm_sq: float
    step: float


@dataclass(frozen=True)
class RankSweepRecord:
    rank: int
    gap_mse: float


@dataclass(frozen=True)
class BoundReport:
    c1: float
    alpha0: float
    trials: int
    theorem1_envelope_ratio: float
    theorem2_envelope_ratio: float
    lemma1_residual: float
    lemma2_violations: int
    fitted_slope: float

    @property
    def passed(self) -> bool:
        return (
            self.theorem1_envelope_ratio <= 1.0
            and self.theorem2_envelope_ratio <= 1.0
            and self.lemma1_residual <= 1e-8
        )


@dataclass
class Trace:
    """Raw per-trial series, shape (trials, T + 1), un-normalized."""

    sq_error: np.ndarray
    misalignment: np.ndarray
    noise_norm_sq: np.ndarray
    step: np.ndarray  # (T + 1,)
    final: np.ndarray  # (trials, d, N) last iterate


class RunAborted(DivergenceError):
    """Divergence with the trial-averaged records completed before the abort."""

    def __init__(self, message, trial, iteration, records):
        super().__init__(message, trial=trial, iteration=iteration)
        self.records = records


def schedule_for(cfg: Config) -> StepSchedule:
    if cfg.schedule == "theory":
        return StepSchedule.theory(cfg.gamma)
    return StepSchedule("simple", 1.0)


def _simulate(
    mdp: MultiTaskMdp,
    gt: GroundTruth,
    algos,
    k: int,
    T: int,
    trials: int,
    seed: int,
    schedule: StepSchedule,
    noise: float,
    diagnostics: bool = True,
):
    """Run every algorithm for ``T`` sweeps over ``trials`` paired chains.

    Returns ``{algo: Trace}``. On divergence raises ``DivergenceError`` whose
    ``partial`` attribute holds the traces truncated before the failing
    iteration.
    """
    d, N = mdp.num_states, mdp.num_tasks
    V_star = gt.value
    limit = DIVERGENCE_FACTOR * max(np.linalg.norm(V_star), 1e-300)
    features = truncated_svd(V_star, k).left_factors if "feature-td" in algos else None

    state = {}
    for a in algos:
        per_trial = []
        for j in range(trials):
            V0 = initialize_value(gt, d, N, seed, trial=j)
            per_trial.append(init_feature_model(features, V0) if a == "feature-td" else V0)
        state[a] = per_trial

    shape = (trials, T + 1)
    traces = {
        a: Trace(
            sq_error=np.full(shape, np.nan),
            misalignment=np.full(shape, np.nan),
            noise_norm_sq=np.full(shape, np.nan),
            step=np.array([step_size(t, schedule) for t in range(T + 1)]),
            final=np.empty((trials, d, N)),
        )
        for a in algos
    }
    basis = gt.complement.basis
    gamma = mdp.discount

    for t in range(T + 1):
        alpha = step_size(t, schedule)
        for j in range(trials):
            batch = sample_batch(mdp, noise, rng_for(seed, SAMPLE_STREAM, j, t))
            for a in algos:
                cur = state[a][j]
                V = cur.values if a == "feature-td" else cur
                if a == "tsvd":
                    G = project_rank_k(V, k)
                else:
                    G = V
                norm = np.linalg.norm(V)
                if not norm <= limit:
                    err = DivergenceError(
                        f"{a}: ||V_t||_F = {norm:.3e} exceeds divergence guard {limit:.3e}",
                        trial=j,
                        iteration=t,
                    )
                    err.partial = {
                        name: _truncate(tr, t) for name, tr in traces.items()
                    }
                    raise err
                if diagnostics:
                    tr = traces[a]
                    diff = V - V_star
                    tr.sq_error[j, t] = np.sum(diff * diff)
                    VB = V @ basis
                    tr.misalignment[j, t] = np.sum(VB * VB)
                    w = noise_matrix(G, batch, mdp)
                    tr.noise_norm_sq[j, t] = np.sum(w * w)
                if t == T:
                    traces[a].final[j] = V
                    continue
                try:
                    if a == "feature-td":
                        state[a][j] = feature_td_step(cur, batch, mdp, alpha)
                    else:
                        state[a][j] = _td_update(V, G, batch, gamma, alpha)
                except DivergenceError as exc:
                    exc.trial, exc.iteration = j, t
                    exc.partial = {name: _truncate(tr, t + 1) for name, tr in traces.items()}
                    raise
    return traces


def _truncate(trace: Trace, n: int) -> Trace:
    return Trace(
        sq_error=trace.sq_error[:, :n],
        misalignment=trace.misalignment[:, :n],
        noise_norm_sq=trace.noise_norm_sq[:, :n],
        step=trace.step[:n],
        final=trace.final,
    )


def _records(trace: Trace, dN: int) -> list[RunRecord]:
    mse = trace.sq_error.mean(axis=0) / dN
    mis = trace.misalignment.mean(axis=0) / dN
    noise = trace.noise_norm_sq.mean(axis=0)
    return [
        RunRecord(t, float(mse[t]), float(mis[t]), float(noise[t]), float(trace.step[t]))
        for t in range(trace.step.shape[0])
        if np.isfinite(mse[t])
    ]


def setup(cfg: Config, seed: int | None = None, rank: int | None = None):
    seed = cfg.seed if seed is None else seed
    rank = cfg.rank if rank is None else rank
    mdp = generate_mdp(cfg.states, cfg.tasks, rank, cfg.gamma, seed)
    return mdp, exact_value(mdp)


def run_convergence(cfg: Config) -> dict[str, list[RunRecord]]:
    """Trial-averaged learning curves for each algorithm in ``cfg.algos``.

    ``mse`` is ``||V_* - V_t||_F^2 / (dN)`` and ``misalignment`` the mass of
    ``V_t`` outside the row space of ``V_*``, also divided by ``dN``.
    Raises ``RunAborted`` carrying the records completed before a divergence.
    """
    cfg.validate()
    mdp, gt = setup(cfg)
    dN = cfg.states * cfg.tasks
    try:
        traces = _simulate(
            mdp, gt, cfg.algos, cfg.k, cfg.iters, cfg.trials, cfg.seed,
            schedule_for(cfg), cfg.noise,
        )
    except DivergenceError as exc:
        partial = getattr(exc, "partial", {})
        records = {a: _records(tr, dN) for a, tr in partial.items()}
        raise RunAborted(str(exc), exc.trial, exc.iteration, records) from exc
    return {a: _records(tr, dN) for a, tr in traces.items()}


def sweep_ranks(cfg: Config) -> list[int]:
    if cfg.ranks is not None:
        return sorted(set(cfg.ranks))
    ranks = list(range(2, cfg.tasks + 1, 4))
    if cfg.tasks not in ranks:
        ranks.append(cfg.tasks)
    return ranks


def run_rank_sweep(cfg: Config) -> list[RankSweepRecord]:
    """Gap between trial-averaged final TSVD and TD iterates, per rank.

    Each rank gets its own MDP (seed mixed with the rank) and truncation
    ``k = min(r + 1, N)``. Output is sorted by rank.
    """
    cfg.validate(sweep=True)
    out = []
    N = cfg.tasks
    for r in sweep_ranks(cfg):
        k = min(r + 1, N)
        seed_r = mix_seed(cfg.seed, r)
        mdp = generate_mdp(cfg.states, N, r, cfg.gamma, seed_r)
        gt = exact_value(mdp)
        traces = _simulate(
            mdp, gt, ("tsvd", "td"), k, cfg.iters, cfg.trials, seed_r,
            schedule_for(cfg), cfg.noise, diagnostics=False,
        )
        mean_tsvd = traces["tsvd"].final.mean(axis=0)
        mean_td = traces["td"].final.mean(axis=0)
        diff = mean_tsvd - mean_td
        out.append(RankSweepRecord(rank=r, gap_mse=float(np.sum(diff * diff) / diff.size)))
    return out


def spearman(xs, ys) -> float:
    return float(stats.spearmanr(xs, ys).statistic)


def theorem1_envelope(t, c1: float, alpha0: float):
    t = np.asarray(t, dtype=float)
    return c1 * alpha0**2 / (t + alpha0)


def theorem2_envelope(t, init_sq_error: float, c1: float, alpha0: float, gamma: float):
    """Bound on E||V_t - V_*||_F^2 for t >= 1.

    The inequality is stated for iterate ``t + 1``; here it is re-indexed so
    ``t`` is the iterate being bounded.
    """
    t = np.asarray(t, dtype=float)
    s = t - 1.0
    coeff = 2.0 * c1 * alpha0 * gamma**2 / (1.0 - gamma) + c1
    return (
        init_sq_error * alpha0 / (s + alpha0 + 1.0)
        + coeff * alpha0**2 * np.log(s + alpha0) / (s + alpha0 + 1.0)
    )


def loglog_slope(ts, values) -> float:
    ts = np.asarray(ts, dtype=float)
    values = np.asarray(values, dtype=float)
    slope, _ = np.polyfit(np.log(ts), np.log(values), 1)
    return float(slope)


def verify_bounds(cfg: Config, min_trials: int = 20) -> BoundReport:
    """Check the misalignment and error-rate envelopes on trial means.

    Uses the theory step size with ``alpha0 = 1 / (1 - gamma)`` regardless of
    ``cfg.schedule`` and at least ``min_trials`` trials.
    """
    cfg.validate()
    if cfg.iters < 1:
        raise ValueError("bound verification needs at least one iteration")
    trials = max(cfg.trials, min_trials)
    schedule = StepSchedule.theory(cfg.gamma)
    mdp, gt = setup(cfg)
    traces = _simulate(
        mdp, gt, ("tsvd",), cfg.k, cfg.iters, trials, cfg.seed, schedule, cfg.noise,
    )
    tr = traces["tsvd"]
    c1 = noise_bound(cfg.states, cfg.tasks, cfg.gamma)
    a0 = schedule.alpha0
    ts = np.arange(1, cfg.iters + 1)
    mis = tr.misalignment.mean(axis=0)
    err = tr.sq_error.mean(axis=0)
    ratio1 = float(np.max(mis[1:] / theorem1_envelope(ts, c1, a0)))
    ratio2 = float(np.max(err[1:] / theorem2_envelope(ts, err[0], c1, a0, cfg.gamma)))
    lo = max(1, cfg.iters // 10)
    window = np.arange(lo, cfg.iters + 1)
    slope = loglog_slope(window, mis[window]) if window.size >= 2 else math.nan
    return BoundReport(
        c1=c1,
        alpha0=a0,
        trials=trials,
        theorem1_envelope_ratio=ratio1,
        theorem2_envelope_ratio=ratio2,
        lemma1_residual=row_space_residual(mdp, gt),
        lemma2_violations=int(np.count_nonzero(tr.noise_norm_sq[:, :-1] > c1)),
        fitted_slope=slope,
    )

"""End-to-end acceptance checks, one test per criterion.

Each test records a ``criterion N: PASS|FAIL ...`` line; the lines are printed
in the terminal summary (see conftest.py) whether or not the test passed.
Run just these with ``pytest tests/test_acceptance.py -v``.
"""

import time

import numpy as np
import pytest

from oracles import rank_k_oracle_eigh, rank_k_oracle_svd, random_rank_k
from tsvd_td import cli
from tsvd_td.config import Config
from tsvd_td.env import (
    SAMPLE_STREAM,
    exact_value,
    generate_mdp,
    row_space_residual,
    rng_for,
    sample_batch,
)
from tsvd_td.experiments import run_convergence, run_rank_sweep, spearman, verify_bounds
from tsvd_td.learner import (
    decompose_matrix_step,
    initialize_value,
    tsvd_td_step,
    vanilla_td_step,
)
from tsvd_td.linalg import project_rank_k

RESULTS = []

DESK = dict(states=200, tasks=40, rank=8, trunc_k=9, gamma=0.95)


def report(n, ok, detail):
    RESULTS.append(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def test_criterion_01_eckart_young():
    start = time.perf_counter()
    worst_oracle = 0.0
    worst_margin = np.inf
    for i in range(200):
        rng = np.random.default_rng([20240, i])
        d, N = rng.integers(1, 9, size=2)
        k = int(rng.integers(1, N + 1))
        M = rng.standard_normal((d, N)) * 10.0 ** rng.uniform(-2, 2)
        P = project_rank_k(M, k)
        worst_oracle = max(
            worst_oracle,
            np.linalg.norm(P - rank_k_oracle_eigh(M, k)),
            np.linalg.norm(P - rank_k_oracle_svd(M, k)),
        )
        err = np.linalg.norm(M - P)
        for j in range(100):
            if j % 2:
                C = random_rank_k(rng, d, N, k)
                # best fit of M within C's row space: a strong competitor
                Q, _ = np.linalg.qr(C.T)
                C = M @ Q[:, :k] @ Q[:, :k].T
            else:
                C = rank_k_oracle_svd(M + 0.1 * np.abs(M).max() * rng.standard_normal((d, N)), k)
            worst_margin = min(worst_margin, np.linalg.norm(M - C) - err)
    elapsed = time.perf_counter() - start
    ok = worst_oracle <= 1e-10 and worst_margin >= -1e-9 and elapsed < 5
    report(1, ok, f"max oracle diff={worst_oracle:.2e} min competitor margin={worst_margin:.2e} "
                  f"time={elapsed:.1f}s")


def test_criterion_02_row_space():
    start = time.perf_counter()
    worst = 0.0
    for i in range(50):
        r = 2 + i % 9
        mdp = generate_mdp(100, 20, r, 0.95, seed=1000 + i)
        worst = max(worst, row_space_residual(mdp, exact_value(mdp)))
    elapsed = time.perf_counter() - start
    report(2, worst <= 1e-8 and elapsed < 10,
           f"max ||R H_perp||/||R||={worst:.2e} over 50 MDPs time={elapsed:.1f}s")


def test_criterion_03_full_rank_equivalence():
    start = time.perf_counter()
    mdp = generate_mdp(50, 10, 3, 0.9, seed=0)
    gt = exact_value(mdp)
    A = B = initialize_value(gt, 50, 10, seed=0)
    identical = True
    for t in range(1000):
        batch = sample_batch(mdp, 0.5, rng_for(0, SAMPLE_STREAM, 0, t))
        A = tsvd_td_step(A, batch, mdp, 10, 1.0 / (t + 1))
        B = vanilla_td_step(B, batch, mdp, 1.0 / (t + 1))
        if A.tobytes() != B.tobytes():
            identical = False
            break
    elapsed = time.perf_counter() - start
    report(3, identical and elapsed < 5,
           f"bit-identical for {t + 1} iterations time={elapsed:.1f}s")


def test_criterion_04_decomposition():
    start = time.perf_counter()
    cfg = Config(**DESK)
    mdp = generate_mdp(cfg.states, cfg.tasks, cfg.rank, cfg.gamma, cfg.seed)
    gt = exact_value(mdp)
    V = initialize_value(gt, cfg.states, cfg.tasks, cfg.seed)
    worst = 0.0
    for t in range(1000):
        batch = sample_batch(mdp, cfg.noise, rng_for(cfg.seed, SAMPLE_STREAM, 0, t))
        alpha = 1.0 / (t + 1)
        _, residual = decompose_matrix_step(V, batch, mdp, cfg.k, alpha)
        worst = max(worst, residual / np.linalg.norm(V))
        V = tsvd_td_step(V, batch, mdp, cfg.k, alpha)
    elapsed = time.perf_counter() - start
    report(4, worst <= 1e-9 and elapsed < 10,
           f"max residual/||V_t||={worst:.2e} time={elapsed:.1f}s")


@pytest.fixture(scope="module")
def bound_report():
    start = time.perf_counter()
    rep = verify_bounds(Config(**DESK, iters=2000, trials=20, schedule="theory"))
    return rep, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_05_misalignment_envelope(bound_report):
    rep, elapsed = bound_report
    in_band = -1.3 <= rep.fitted_slope <= -0.7
    ok = rep.theorem1_envelope_ratio <= 1.0 and in_band and elapsed < 120
    report(5, ok, f"max mean/envelope={rep.theorem1_envelope_ratio:.2e} "
                  f"slope on [200,2000]={rep.fitted_slope:.3f} (band [-1.3,-0.7]) "
                  f"time={elapsed:.1f}s")


@pytest.mark.slow
def test_criterion_06_error_envelope(bound_report):
    rep, elapsed = bound_report
    report(6, rep.theorem2_envelope_ratio <= 1.0 and elapsed < 120,
           f"max mean/envelope={rep.theorem2_envelope_ratio:.2e} time={elapsed:.1f}s (shared)")


@pytest.mark.slow
def test_criterion_07_convergence_ordering():
    start = time.perf_counter()
    recs = run_convergence(Config(**DESK, iters=5000, trials=5, schedule="simple"))
    elapsed = time.perf_counter() - start
    f, s, v = (recs[a][-1].mse for a in ("feature-td", "tsvd", "td"))
    ok = f <= s < v and (v - s) / v >= 0.05 and elapsed < 120
    report(7, ok, f"final mse feature-td={f:.4g} tsvd={s:.4g} td={v:.4g} time={elapsed:.1f}s")


@pytest.mark.slow
def test_criterion_08_rank_sweep():
    start = time.perf_counter()
    ranks = (2, 6, 10, 14, 18, 22, 26, 30)
    recs = run_rank_sweep(Config(states=150, tasks=30, iters=10000, trials=10, ranks=ranks))
    elapsed = time.perf_counter() - start
    gaps = [r.gap_mse for r in recs]
    rho = spearman([r.rank for r in recs], gaps)
    ok = [r.rank for r in recs] == list(ranks) and gaps[-1] == 0.0 and rho < 0 and elapsed < 600
    report(8, ok, f"gap at r=30 is {gaps[-1]!r} spearman={rho:.3f} time={elapsed:.1f}s")


def test_criterion_09_fixed_point_in_expectation():
    start = time.perf_counter()
    seed, n = 0, 10_000
    mdp = generate_mdp(30, 8, 3, 0.95, seed)
    gt = exact_value(mdp)
    samples = np.empty((n, 30, 8))
    for t in range(n):
        batch = sample_batch(mdp, 0.0, rng_for(seed, SAMPLE_STREAM, 0, t))
        samples[t] = tsvd_td_step(gt.value, batch, mdp, 3, 1.0)
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(n)
    dev = np.abs(mean - gt.value)
    elapsed = time.perf_counter() - start
    ok = bool(np.all(dev <= 3 * se)) and elapsed < 30
    z = np.max(dev / np.where(se > 0, se, np.inf))
    report(9, ok, f"max |mean - V_*|/se={z:.2f} over 240 entries time={elapsed:.1f}s")


def test_criterion_10_determinism(tmp_path):
    start = time.perf_counter()
    outputs = []
    for name in ("a", "b"):
        cfg = Config(states=60, tasks=12, rank=3, iters=300, trials=3, out=str(tmp_path / name))
        assert cli.cmd_run(cfg) == 0
        outputs.append((tmp_path / name / "convergence.csv").read_bytes())
    elapsed = time.perf_counter() - start
    report(10, outputs[0] == outputs[1] and elapsed < 60,
           f"{len(outputs[0])} CSV bytes, identical={outputs[0] == outputs[1]} time={elapsed:.1f}s")

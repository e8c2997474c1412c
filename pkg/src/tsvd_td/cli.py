"""Command-line entry point: ``tsvd-td {generate,run,sweep,verify}``.

Exit status: 0 success, 1 invalid configuration, 2 divergence abort,
3 bound verification failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from dataclasses import asdict
from pathlib import Path

from .config import ALGORITHMS, Config, ConfigError, build_config, coerce, read_config_file
from .env import exact_value, generate_mdp, row_space_residual, save_mdp
from .experiments import (
    RunAborted,
    run_convergence,
    run_rank_sweep,
    spearman,
    verify_bounds,
)
from .learner import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_UNVERIFIED = 0, 1, 2, 3

CONVERGENCE_HEADER = ["iteration", "algorithm", "mse", "misalignment", "noise_norm_sq", "alpha"]
SWEEP_HEADER = ["rank", "gap_mse"]


def fmt(x: float) -> str:
    return format(x, ".17g")


def write_atomic(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    if isinstance(data, str):
        tmp.write_text(data, encoding="utf-8", newline="")
    else:
        tmp.write_bytes(data)
    tmp.replace(path)


def convergence_csv(records: dict, trailer: str | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CONVERGENCE_HEADER)
    for algo, rows in records.items():
        for rec in rows:
            w.writerow(
                [rec.iteration, algo, fmt(rec.mse), fmt(rec.misalignment),
                 fmt(rec.noise_norm_sq), fmt(rec.step)]
            )
    if trailer:
        buf.write(f"# {trailer}\n")
    return buf.getvalue()


def sweep_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for rec in sorted(records, key=lambda r: r.rank):
        w.writerow([rec.rank, fmt(rec.gap_mse)])
    return buf.getvalue()


def _svg(series: dict, title: str, xlabel: str, ylabel: str, logy: bool) -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "tsvd-td", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6.4, 4.2))
        for label, (xs, ys) in series.items():
            if logy:
                pts = [(x, y) for x, y in zip(xs, ys) if y > 0]
                xs, ys = [p[0] for p in pts], [p[1] for p in pts]
            ax.plot(xs, ys, label=label, linewidth=1.2)
        if logy:
            ax.set_yscale("log")
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.legend()
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()


def _write_convergence_plots(records: dict, out: Path) -> None:
    for metric, ylabel in (("mse", "||V_* - V_t||_F^2 / dN"),
                           ("misalignment", "||V_t H_perp H_perp^T||_F^2 / dN")):
        series = {
            algo: ([r.iteration for r in rows], [getattr(r, metric) for r in rows])
            for algo, rows in records.items()
        }
        write_atomic(out / f"convergence_{metric}.svg",
                     _svg(series, metric, "iteration", ylabel, logy=True))


def cmd_generate(cfg: Config) -> int:
    mdp = generate_mdp(cfg.states, cfg.tasks, cfg.rank, cfg.gamma, cfg.seed)
    gt = exact_value(mdp)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"mdp_seed{cfg.seed}.bin"
    save_mdp(mdp, path)
    print(
        f"wrote {path}: d={cfg.states} N={cfg.tasks} r={cfg.rank} "
        f"sigma_max={gt.top_singular_value:.12g} "
        f"lemma1_residual={row_space_residual(mdp, gt):.3e}"
    )
    return EXIT_OK


def cmd_run(cfg: Config) -> int:
    out = Path(cfg.out)
    csv_path = out / "convergence.csv"
    try:
        records = run_convergence(cfg)
    except RunAborted as exc:
        trailer = f"aborted: trial={exc.trial} iteration={exc.iteration}: {exc}"
        write_atomic(csv_path, convergence_csv(exc.records, trailer))
        print(f"error: divergence, {trailer}", file=sys.stderr)
        return EXIT_DIVERGED
    write_atomic(csv_path, convergence_csv(records))
    _write_convergence_plots(records, out)
    finals = ", ".join(f"{a}={rows[-1].mse:.6g}" for a, rows in records.items())
    print(f"wrote {csv_path}; final mse: {finals}")
    return EXIT_OK


def cmd_sweep(cfg: Config) -> int:
    out = Path(cfg.out)
    try:
        records = run_rank_sweep(cfg)
    except DivergenceError as exc:
        print(f"error: divergence at trial={exc.trial} iteration={exc.iteration}: {exc}",
              file=sys.stderr)
        return EXIT_DIVERGED
    csv_path = out / "sweep.csv"
    write_atomic(csv_path, sweep_csv(records))
    ranks = [r.rank for r in records]
    gaps = [r.gap_mse for r in records]
    write_atomic(out / "sweep.svg",
                 _svg({"tsvd vs td": (ranks, gaps)}, "gap vs rank", "rank", "gap mse", logy=False))
    rho = spearman(ranks, gaps) if len(records) > 1 else float("nan")
    print(f"wrote {csv_path}; spearman(rank, gap_mse)={rho:.4f}")
    return EXIT_OK


def cmd_verify(cfg: Config) -> int:
    if cfg.schedule != "theory":
        print("warning: verify uses the theory schedule with alpha0 = 1/(1 - gamma); "
              f"ignoring schedule={cfg.schedule}", file=sys.stderr)
    try:
        report = verify_bounds(cfg)
    except DivergenceError as exc:
        print(f"error: divergence at trial={exc.trial} iteration={exc.iteration}: {exc}",
              file=sys.stderr)
        return EXIT_DIVERGED
    for key, value in asdict(report).items():
        print(f"{key}={fmt(value) if isinstance(value, float) else value}")
    print(f"passed={str(report.passed).lower()}")
    return EXIT_OK if report.passed else EXIT_UNVERIFIED


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "sweep": cmd_sweep, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("configuration (flags override --config entries)")
    g.add_argument("--config", type=Path, help="flat 'key = value' config file")
    g.add_argument("--states", type=int, help="number of states d (default 200)")
    g.add_argument("--tasks", type=int, help="number of tasks N (default 40)")
    g.add_argument("--rank", type=int, help="rank r of the reward matrix (default 8)")
    g.add_argument("--trunc-k", dest="trunc_k", type=int,
                   help="truncation rank k (default min(r + 1, N))")
    g.add_argument("--gamma", type=float, help="discount factor (default 0.95)")
    g.add_argument("--iters", type=int, help="iterations T (default 5000)")
    g.add_argument("--trials", type=int, help="independent trials (default 5)")
    g.add_argument("--seed", type=int, help="64-bit base seed (default 0)")
    g.add_argument("--schedule", choices=["theory", "simple"],
                   help="step size: alpha0/(t+alpha0) or 1/(t+1) (default simple)")
    g.add_argument("--noise", type=float, help="reward noise half-width beta (default 0)")
    g.add_argument("--algos", help=f"comma-separated subset of {','.join(ALGORITHMS)}")
    g.add_argument("--out", help="output directory (default ./out)")

    parser = argparse.ArgumentParser(
        prog="tsvd-td", description="Truncated-SVD TD learning experiments."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write an MDP snapshot")
    sub.add_parser("run", parents=[common], help="convergence curves (CSV + SVG)")
    sweep = sub.add_parser("sweep", parents=[common], help="TSVD/TD gap across ranks")
    sweep.add_argument("--ranks", help="comma-separated ranks (default 2,6,...,N)")
    sub.add_parser("verify", parents=[common], help="check the rate bounds")
    return parser


def config_from_args(args: argparse.Namespace) -> Config:
    names = ["states", "tasks", "rank", "trunc_k", "gamma", "iters", "trials", "seed",
             "schedule", "noise", "algos", "out", "ranks"]
    given = {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}
    file_values = read_config_file(args.config) if args.config else None
    cfg = build_config(file_values, coerce(given))
    return cfg.validate(sweep=args.command == "sweep")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return COMMANDS[args.command](cfg)


if __name__ == "__main__":
    sys.exit(main())

import csv
import hashlib
import xml.etree.ElementTree as ET

import pytest

from tsvd_td import cli, experiments

FAST = ["--states", "20", "--tasks", "5", "--rank", "2"]


def read_rows(path):
    lines = path.read_text().splitlines()
    body = [ln for ln in lines if not ln.startswith("#")]
    return list(csv.DictReader(body))


def test_generate_default(tmp_path, capsys):
    assert cli.main(["generate", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "d=200 N=40 r=8" in out
    residual = float(out.split("lemma1_residual=")[1])
    assert residual <= 1e-8
    assert (tmp_path / "mdp_seed0.bin").exists()


def test_generate_rejects_rank_above_tasks(tmp_path, capsys):
    code = cli.main(["generate", "--tasks", "5", "--rank", "6", "--out", str(tmp_path)])
    assert code == 1
    assert "rank" in capsys.readouterr().err


def test_generate_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cli.main(["generate", *FAST, "--seed", "11", "--out", str(a)])
    cli.main(["generate", *FAST, "--seed", "11", "--out", str(b)])
    digest = [hashlib.sha256((p / "mdp_seed11.bin").read_bytes()).hexdigest() for p in (a, b)]
    assert digest[0] == digest[1]


def test_run_row_count_and_schema(tmp_path):
    assert cli.main(["run", *FAST, "--iters", "3", "--trials", "1", "--out", str(tmp_path)]) == 0
    path = tmp_path / "convergence.csv"
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,algorithm,mse,misalignment,noise_norm_sq,alpha"
    assert len(lines) == 1 + 4 * 3
    rows = read_rows(path)
    assert {r["algorithm"] for r in rows} == {"tsvd", "td", "feature-td"}
    for r in rows:
        assert float(r["alpha"]) == 1.0 / (int(r["iteration"]) + 1)
        mantissa = r["mse"].split("e")[0].replace("-", "").replace(".", "").lstrip("0")
        assert len(mantissa) >= 12 or float(r["mse"]) == float(f"{float(r['mse']):.12g}")
    for name in ("convergence_mse.svg", "convergence_misalignment.svg"):
        root = ET.parse(tmp_path / name).getroot()
        assert root.tag.endswith("svg")
        text = (tmp_path / name).read_text()
        assert "xlink:href=\"http" not in text and "<image" not in text
        for label in ("tsvd", "td", "feature-td"):
            assert f">{label}<" in text


def test_run_algorithm_subset(tmp_path):
    cli.main(["run", *FAST, "--iters", "2", "--trials", "1", "--algos", "td", "--out", str(tmp_path)])
    rows = read_rows(tmp_path / "convergence.csv")
    assert len(rows) == 3 and {r["algorithm"] for r in rows} == {"td"}


def test_run_theory_schedule_alpha(tmp_path):
    cli.main(["run", *FAST, "--gamma", "0.5", "--iters", "2", "--trials", "1",
              "--schedule", "theory", "--out", str(tmp_path)])
    alphas = [float(r["alpha"]) for r in read_rows(tmp_path / "convergence.csv")][:3]
    assert alphas == [1.0, 2.0 / 3.0, 0.5]


def test_run_divergence_writes_partial_csv(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(experiments, "DIVERGENCE_FACTOR", 1e-3)
    code = cli.main(["run", *FAST, "--iters", "3", "--trials", "1", "--out", str(tmp_path)])
    assert code == 2
    lines = (tmp_path / "convergence.csv").read_text().splitlines()
    assert lines[0].startswith("iteration,")
    assert lines[-1].startswith("# aborted: trial=0 iteration=0")
    assert "divergence" in capsys.readouterr().err


def test_sweep_output(tmp_path, capsys):
    code = cli.main(["sweep", "--states", "15", "--tasks", "5", "--iters", "20", "--trials", "2",
                     "--ranks", "5,1,3", "--out", str(tmp_path)])
    assert code == 0
    rows = read_rows(tmp_path / "sweep.csv")
    assert [int(r["rank"]) for r in rows] == [1, 3, 5]
    assert float(rows[-1]["gap_mse"]) == 0.0
    ET.parse(tmp_path / "sweep.svg")
    assert "spearman" in capsys.readouterr().out


def test_sweep_rejects_rank_out_of_range(tmp_path):
    assert cli.main(["sweep", "--tasks", "5", "--ranks", "6", "--out", str(tmp_path)]) == 1


def test_verify_report(tmp_path, capsys):
    code = cli.main(["verify", *FAST, "--gamma", "0", "--iters", "30", "--out", str(tmp_path)])
    captured = capsys.readouterr()
    assert code == 0
    report = dict(line.split("=", 1) for line in captured.out.splitlines())
    assert float(report["c1"]) == 16 * 5**2 * 20
    assert report["passed"] == "true"
    assert int(report["trials"]) >= 20
    assert "warning" in captured.err


def test_verify_c1_for_config(tmp_path, capsys):
    cli.main(["verify", *FAST, "--gamma", "0.9", "--iters", "20", "--schedule", "theory"])
    captured = capsys.readouterr()
    report = dict(line.split("=", 1) for line in captured.out.splitlines())
    assert float(report["c1"]) == pytest.approx(16 * 25 * 20 / 0.01)
    assert float(report["alpha0"]) == pytest.approx(10.0)
    assert captured.err == ""


def test_config_file_precedence(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# desk run\nstates = 20\ntasks = 5\nrank = 2\niters = 7  # short\ntrunc-k = 3\n")
    args = cli.build_parser().parse_args(["run", "--config", str(conf), "--iters", "2"])
    cfg = cli.config_from_args(args)
    assert (cfg.states, cfg.tasks, cfg.rank, cfg.iters, cfg.k) == (20, 5, 2, 2, 3)
    assert cfg.gamma == 0.95


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.conf"
    bad.write_text("colour = blue\n")
    assert cli.main(["run", "--config", str(bad)]) == 1
    assert cli.main(["run", "--config", str(tmp_path / "missing.conf")]) == 1
    bad.write_text("just words\n")
    assert cli.main(["run", "--config", str(bad)]) == 1

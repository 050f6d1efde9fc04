import json
import math

import numpy as np
import pytest

from icl_lab import cli
from icl_lab.config import ConfigError, parse_config, parse_distribution, sweep_configs

MINIMAL = """\
# two features, two tokens
p = balanced(2)
N = 2
eta = {eta}
max_iters = 1
stop_on_gap = false
"""


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def read_csv(path):
    lines = path.read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    return header, [dict(zip(header, line.split(","))) for line in lines[1:]]


# config grammar


def test_parse_minimal():
    cfg = parse_config(MINIMAL.format(eta=3))
    assert cfg.train.K == 2 and cfg.train.N == 2 and cfg.train.eta == 3.0
    assert cfg.train.epsilon is None
    assert cfg.emit == ("trajectory_csv", "phase_json", "loss_json", "plotdata")


def test_parse_distribution_forms():
    assert parse_distribution("imbalanced(4, 0.55)").regime == "imbalanced"
    np.testing.assert_allclose(parse_distribution("0.2, 0.3, 0.5").p, [0.2, 0.3, 0.5])
    assert parse_distribution("0.25,0.25,0.5", "custom").regime == "custom"


def test_threshold_and_sweep_keys():
    cfg = parse_config(
        "p = balanced(3)\nN = 16\neta = 1\nmax_iters = 5\n"
        "threshold.imb_phase1 = 0.25  # relaxed\nsweep.K = 3, 4\nsweep.N_per_K2 = 2\n"
    )
    assert cfg.thresholds.imb_phase1 == 0.25
    runs = sweep_configs(cfg)
    assert [(r.train.K, r.train.N) for _, r in runs] == [(3, 18), (4, 32)]


@pytest.mark.parametrize(
    "text, line",
    [
        ("N = 2\neta = 1\nmax_iters = 1\n", None),
        ("p = balanced(2)\nN = two\neta = 1\nmax_iters = 1\n", 2),
        ("p = balanced(2)\nN = 2\neta = 1\nmax_iters = 1\nwat = 3\n", 5),
        ("p = balanced(2)\nN = 2\neta = 1\nmax_iters = 1\nemit = pictures\n", 5),
        ("p = 0.5, 0.6\nN = 2\neta = 1\nmax_iters = 1\n", 1),
        ("p = balanced(2)\nN = 2\nN = 3\neta = 1\nmax_iters = 1\n", 3),
        ("p = balanced(2)\nN 2\neta = 1\nmax_iters = 1\n", 2),
        ("p = balanced(3)\nN = 2\neta = 1\nmax_iters = 1\nd = 2\n", 5),
    ],
)
def test_config_errors_are_line_anchored(text, line):
    with pytest.raises(ConfigError) as exc:
        parse_config(text, "run.cfg")
    assert exc.value.line == line
    assert str(exc.value).startswith("run.cfg:")


# simulate


def test_simulate_minimal(tmp_path):
    cfg = write(tmp_path, "run.cfg", MINIMAL.format(eta=3))
    out = tmp_path / "out"
    assert cli.main(["simulate", str(cfg), "-o", str(out)]) == 0
    header, rows = read_csv(out / "trajectory.csv")
    assert header == [
        "t", "A_1", "A_2", "B_1_2", "B_2_1", "alpha_1", "alpha_2",
        "loss_total", "loss_gap", "estimator",
    ]
    assert [r["t"] for r in rows] == ["0", "1"]
    assert float(rows[1]["A_1"]) == 3 / 16
    phases = json.loads((out / "phases.json").read_text())
    assert set(phases) == {"balanced"}
    assert set(phases["balanced"]["features"]) == {"1", "2"}
    loss = json.loads((out / "loss.json").read_text())
    assert loss["status"] == "completed"
    assert (out / "plotdata" / "A_1.dat").read_text().splitlines()[1:] == ["0 0", "1 0.1875"]


def test_simulate_imbalanced_writes_imbalanced_phases(tmp_path):
    cfg = write(tmp_path, "run.cfg", "p = imbalanced(3, 0.6)\nN = 12\neta = 2\nmax_iters = 5\n")
    out = tmp_path / "out"
    assert cli.main(["simulate", str(cfg), "-o", str(out)]) == 0
    phases = json.loads((out / "phases.json").read_text())
    assert set(phases["imbalanced"]["features"]["1"]) == {"T1star"}
    assert set(phases["imbalanced"]["features"]["2"]) == {"T1", "T2", "T3", "T4"}


def test_simulate_missing_p(tmp_path, capsys):
    cfg = write(tmp_path, "run.cfg", "N = 2\neta = 1\nmax_iters = 1\n")
    assert cli.main(["simulate", str(cfg)]) == 2
    assert "missing required key 'p'" in capsys.readouterr().err


def test_simulate_unreadable_config(tmp_path):
    assert cli.main(["simulate", str(tmp_path / "absent.cfg")]) == 2


def test_usage_error_exit_code():
    assert cli.main(["frobnicate"]) == 2


def test_simulate_byte_identical(tmp_path):
    text = "p = 0.5, 0.3, 0.2\nN = 300\neta = 2\nmax_iters = 15\nestimator = monte_carlo\nsamples = 4000\nseed = 5\n"
    cfg = write(tmp_path, "run.cfg", text)
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert cli.main(["simulate", str(cfg), "-o", str(out)]) == 0
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes()
        assert b"\r\n" not in (outs[0] / rel).read_bytes()


def test_simulate_numeric_abort(tmp_path, monkeypatch):
    import icl_lab.trainer as trainer

    real_step = trainer.gd_step
    monkeypatch.setattr(trainer, "gd_step", lambda M, rep, eta: real_step(M, rep, eta) * np.inf)
    cfg = write(tmp_path, "run.cfg", MINIMAL.format(eta=1).replace("max_iters = 1", "max_iters = 4"))
    out = tmp_path / "out"
    assert cli.main(["simulate", str(cfg), "-o", str(out)]) == 3
    _, rows = read_csv(out / "trajectory.csv")
    assert [r["t"] for r in rows] == ["0"]
    assert json.loads((out / "loss.json").read_text())["status"] == "aborted"


def test_report(tmp_path, capsys):
    cfg = write(tmp_path, "run.cfg", MINIMAL.format(eta=3))
    out = tmp_path / "out"
    cli.main(["simulate", str(cfg), "-o", str(out)])
    capsys.readouterr()
    assert cli.main(["report", str(out)]) == 0
    text = capsys.readouterr().out
    assert "status: completed" in text and "T1=" in text
    assert cli.main(["report", str(tmp_path / "nothing")]) == 2


# verify


def test_verify_gradients(tmp_path, capsys):
    dest = tmp_path / "v.json"
    assert cli.main(["verify", "gradients", "-o", str(dest)]) == 0
    body = json.loads(dest.read_text())
    fd = next(c for c in body["checks"] if c["name"] == "finite_difference_max_rel_error")
    assert fd["observed"] <= 1e-6 and fd["tolerance"] == 1e-6 and fd["passed"]


def test_verify_events_reports_bound(capsys):
    assert cli.main(["verify", "events"]) == 0
    body = json.loads(capsys.readouterr().out)
    assert len(body["checks"]) == 4
    for c in body["checks"]:
        assert c["observed"] <= c["tolerance"]


def test_verify_failure_exit_code(monkeypatch, capsys):
    from icl_lab import verify

    monkeypatch.setitem(verify.SUITES, "gradients", lambda seed: [verify.check("x", 1.0, 0.0, False)])
    assert cli.main(["verify", "gradients"]) == 1


# sweep


def test_sweep_K(tmp_path, monkeypatch):
    monkeypatch.setenv("ICL_LAB_THREADS", "2")
    text = "p = balanced(3)\nN = 16\neta = 2\nmax_iters = 400\nsweep.K = 2, 3, 4\nsweep.N_per_K2 = 2\n"
    cfg = write(tmp_path, "sweep.cfg", text)
    out = tmp_path / "sw"
    assert cli.main(["sweep", str(cfg), "-o", str(out)]) == 0
    header, rows = read_csv(out / "sweep.csv")
    assert header[:6] == ["sweep_K", "K", "N", "eta", "status", "T1"]
    T1 = [float(r["T1"]) for r in rows]
    assert all(a < b for a, b in zip(T1, T1[1:]))
    summary = json.loads((out / "sweep.json").read_text())
    assert math.isfinite(summary["loglog_slope_T1"])
    assert (out / "K_3" / "trajectory.csv").exists()


def test_sweep_eta_halves_T1(tmp_path):
    text = "p = balanced(3)\nN = 18\neta = 1\nmax_iters = 2000\nsweep.eta = 0.25, 0.5\n"
    out = tmp_path / "sw"
    assert cli.main(["sweep", str(write(tmp_path, "s.cfg", text)), "-o", str(out)]) == 0
    _, rows = read_csv(out / "sweep.csv")
    ratio = float(rows[1]["T1"]) / float(rows[0]["T1"])
    assert 0.4 <= ratio <= 0.6


def test_sweep_empty_axis(tmp_path):
    text = "p = balanced(3)\nN = 16\neta = 1\nmax_iters = 5\nsweep.K =\n"
    assert cli.main(["sweep", str(write(tmp_path, "s.cfg", text))]) == 2
    no_axis = "p = balanced(3)\nN = 16\neta = 1\nmax_iters = 5\n"
    assert cli.main(["sweep", str(write(tmp_path, "t.cfg", no_axis))]) == 2


def test_sweep_records_failures(tmp_path, monkeypatch):
    monkeypatch.setenv("ICL_LAB_THREADS", "1")
    text = (
        "p = balanced(3)\nN = 16\neta = 1\nmax_iters = 3\nestimator = exact\nbudget = 200\n"
        "sweep.K = 2, 6\nsweep.N_per_K2 = 2\n"
    )
    out = tmp_path / "sw"
    assert cli.main(["sweep", str(write(tmp_path, "s.cfg", text)), "-o", str(out)]) == 0
    _, rows = read_csv(out / "sweep.csv")
    assert rows[0]["status"] == "completed"
    assert rows[1]["status"] == "failed"
    assert "EnumerationTooLarge" in rows[1]["error"]

"""``icl-lab`` command line: simulate, verify, sweep and report.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from icl_lab.analysis import detect_phases_balanced, detect_phases_imbalanced
from icl_lab.artifacts import to_json, trajectory_csv, write_plotdata, write_text, fmt
from icl_lab.config import ConfigError, RunConfig, load_config, sweep_configs
from icl_lab.errors import EnumerationTooLarge, NumericError
from icl_lab.trainer import TrajectoryRecord, dual_mode_run, gd_run
from icl_lab.verify import SUITES, run_suite

log = logging.getLogger("icl_lab")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


def detect_all(traj: TrajectoryRecord, cfg: RunConfig) -> dict:
    tr = cfg.train
    out = {}
    if tr.dist.regime != "imbalanced":
        out["balanced"] = detect_phases_balanced(
            traj, tr.dist, tr.N, cfg.epsilon, tr.event_c, cfg.thresholds
        )
    else:
        out["imbalanced"] = detect_phases_imbalanced(
            traj, tr.dist, tr.N, cfg.epsilon, tr.event_c, cfg.thresholds
        )
    return out


def train(cfg: RunConfig) -> tuple[TrajectoryRecord, float | None]:
    if cfg.train.mode == "both":
        res = dual_mode_run(cfg.train)
        return res.reduced, res.divergence
    return gd_run(cfg.train), None


def loss_summary(traj: TrajectoryRecord, cfg: RunConfig, divergence=None) -> dict:
    tr = cfg.train
    return {
        "status": traj.status,
        "message": traj.message,
        "iterations": int(traj.t[-1]),
        "K": tr.K,
        "N": tr.N,
        "eta": tr.eta,
        "p": tr.dist.p.tolist(),
        "regime": tr.dist.regime,
        "estimator": traj.estimator,
        "samples": traj.samples,
        "dropped_mass": traj.dropped_mass,
        "dual_mode_divergence": divergence,
        "final_weights": traj.final.tolist(),
        "final_loss": traj.losses[-1].to_dict(),
    }


def write_run(traj, phases, cfg: RunConfig, out: Path, divergence=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    if "trajectory_csv" in cfg.emit:
        write_text(out / "trajectory.csv", trajectory_csv(traj))
    if "phase_json" in cfg.emit:
        body = {name: rep.to_dict() for name, rep in phases.items()}
        write_text(out / "phases.json", to_json(body) + "\n")
    if "loss_json" in cfg.emit:
        write_text(out / "loss.json", to_json(loss_summary(traj, cfg, divergence)) + "\n")
    if "plotdata" in cfg.emit:
        write_plotdata(traj, out / "plotdata")


def simulate(cfg: RunConfig, out: Path) -> tuple[TrajectoryRecord, dict]:
    traj, div = train(cfg)
    phases = detect_all(traj, cfg)
    write_run(traj, phases, cfg, out, div)
    return traj, phases


def t1_summary(phases: dict) -> tuple[float, list[float]]:
    """Largest phase-I boundary over the features that have one."""
    rep = phases.get("balanced") or phases.get("imbalanced")
    per_k = []
    for k in sorted(rep.features):
        b = rep.features[k].get("T1")
        if b is not None:
            per_k.append(float(b.t) if b.completed else math.nan)
    valid = [t for t in per_k if not math.isnan(t)]
    return (max(valid) if len(valid) == len(per_k) and valid else math.nan), per_k


def _sweep_one(job):
    value, cfg, out = job
    row = {"value": value, "K": cfg.train.K, "N": cfg.train.N, "eta": cfg.train.eta}
    try:
        traj, phases = simulate(cfg, out)
        T1, per_k = t1_summary(phases)
        row.update(status=traj.status, T1=T1, T1_k=per_k, final_gap=traj.losses[-1].gap,
                   iterations=int(traj.t[-1]), error="")
    except (ValueError, ArithmeticError, EnumerationTooLarge, MemoryError) as exc:
        row.update(status="failed", T1=math.nan, T1_k=[], final_gap=math.nan,
                   iterations=-1, error=f"{type(exc).__name__}: {exc}")
    return row


def worker_count(jobs: int) -> int:
    raw = os.environ.get("ICL_LAB_THREADS")
    cap = os.cpu_count() or 1
    if raw:
        try:
            cap = max(1, int(raw))
        except ValueError:
            raise ConfigError(f"ICL_LAB_THREADS must be an integer, got {raw!r}", "environment")
    return max(1, min(cap, jobs))


def loglog_slope(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    ok = np.isfinite(y) & (y > 0) & (x > 0)
    if ok.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def sweep(cfg: RunConfig, out: Path) -> tuple[list[dict], float]:
    if cfg.sweep_axis is None or not cfg.sweep_values:
        raise ConfigError("sweep needs a nonempty sweep.K or sweep.eta axis")
    jobs = [(v, c, out / f"{cfg.sweep_axis}_{fmt(v)}") for v, c in sweep_configs(cfg)]
    workers = worker_count(len(jobs))
    if workers == 1:
        rows = [_sweep_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    slope = loglog_slope([r["value"] for r in rows], [r["T1"] for r in rows])
    lines = [f"sweep_{cfg.sweep_axis},K,N,eta,status,T1,final_gap,iterations,error"]
    for r in rows:
        lines.append(",".join([
            fmt(r["value"]), str(r["K"]), str(r["N"]), fmt(r["eta"]), r["status"],
            fmt(r["T1"]), fmt(r["final_gap"]), str(r["iterations"]),
            r["error"].replace(",", ";").replace("\n", " "),
        ]))
    write_text(out / "sweep.csv", "\n".join(lines) + "\n")
    summary = {"axis": cfg.sweep_axis, "loglog_slope_T1": slope, "runs": rows}
    write_text(out / "sweep.json", to_json(summary) + "\n")
    return rows, slope


def report_text(run_dir: Path) -> str:
    loss = json.loads((run_dir / "loss.json").read_text(encoding="utf-8"))
    lines = [
        f"run: {run_dir}",
        f"status: {loss['status']} after {loss['iterations']} iterations",
        f"K={loss['K']} N={loss['N']} eta={loss['eta']} regime={loss['regime']} "
        f"estimator={loss['estimator']}",
    ]
    fl = loss["final_loss"]
    lines.append(f"final loss {fl['L']:.6g}, lower bound {fl['Llow']}, gap {fl['gap']:.6g}")
    phase_path = run_dir / "phases.json"
    if phase_path.exists():
        phases = json.loads(phase_path.read_text(encoding="utf-8"))
        for name, rep in phases.items():
            lines.append(f"{name} phases (eps={rep['epsilon']}, c={rep['c']:.4g}):")
            for k, bounds in rep["features"].items():
                parts = []
                for label, b in bounds.items():
                    if not b["applicable"]:
                        parts.append(f"{label}=n/a")
                        continue
                    mark = "" if b["completed"] else "+"
                    flag = "?" if b["ambiguous"] else ""
                    parts.append(f"{label}={b['t']}{mark}{flag}")
                conv = rep["converged_at"].get(k)
                lines.append(f"  k={k}: " + " ".join(parts) + f"  converged_at={conv}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="icl-lab", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="train one configuration and write artifacts")
    sim.add_argument("config", type=Path)
    sim.add_argument("-o", "--output-dir", type=Path, help="overrides output_dir in the config")

    ver = sub.add_parser("verify", help="run a seeded property suite")
    ver.add_argument("suite", choices=[*SUITES, "all"])
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("-o", "--output", type=Path, help="also write the JSON report here")

    swp = sub.add_parser("sweep", help="run a K or eta sweep declared in the config")
    swp.add_argument("config", type=Path)
    swp.add_argument("-o", "--output-dir", type=Path)

    rep = sub.add_parser("report", help="summarize a run directory")
    rep.add_argument("run_dir", type=Path)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "simulate":
            cfg = load_config(args.config)
            out = args.output_dir or cfg.output_dir
            traj, _ = simulate(cfg, out)
            print(f"{traj.status}: {int(traj.t[-1])} iterations, gap {traj.losses[-1].gap:.6g} -> {out}")
            return EXIT_NUMERIC if traj.status == "aborted" else EXIT_OK
        if args.command == "verify":
            checks = run_suite(args.suite, args.seed)
            ok = all(c["passed"] for c in checks)
            body = to_json({"suite": args.suite, "seed": args.seed, "passed": ok, "checks": checks})
            if args.output:
                write_text(args.output, body + "\n")
            print(body)
            return EXIT_OK if ok else EXIT_VERIFY
        if args.command == "sweep":
            cfg = load_config(args.config)
            out = args.output_dir or cfg.output_dir
            rows, slope = sweep(cfg, out)
            for r in rows:
                print(f"{cfg.sweep_axis}={fmt(r['value'])} status={r['status']} T1={fmt(r['T1'])}")
            print(f"log-log slope of T1 vs {cfg.sweep_axis}: {fmt(slope)}")
            return EXIT_OK
        if args.command == "report":
            if not (args.run_dir / "loss.json").exists():
                print(f"error: {args.run_dir} has no loss.json", file=sys.stderr)
                return EXIT_USAGE
            print(report_text(args.run_dir))
            return EXIT_OK
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except EnumerationTooLarge as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""CSV, JSON and plot-data writers.

All files are UTF-8 with LF line endings and floats carry 17 significant
digits, so artifacts are byte-identical across reruns of the same config.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from icl_lab.trainer import TrajectoryRecord


def fmt(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    return format(x, ".17g")


def to_json(obj, indent: int = 2, _level: int = 0) -> str:
    """Serialize plain data with fixed float formatting (NaN/inf become null)."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{to_json(str(k))}: {to_json(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj.tolist() if isinstance(obj, np.ndarray) else obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(to_json(v, indent, _level + 1) for v in seq) + "]"
        items = [pad + to_json(v, indent, _level + 1) for v in seq]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt(obj) if math.isfinite(obj) else "null"
    if isinstance(obj, (str, Path)):
        s = str(obj)
        s = s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")
        return f'"{s}"'
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def trajectory_header(K: int) -> list[str]:
    cols = ["t"] + [f"A_{k + 1}" for k in range(K)]
    cols += [f"B_{k + 1}_{n + 1}" for k in range(K) for n in range(K) if n != k]
    cols += [f"alpha_{k + 1}" for k in range(K)]
    return cols + ["loss_total", "loss_gap", "estimator"]


def trajectory_csv(traj: TrajectoryRecord) -> str:
    K = traj.M.shape[1]
    lines = [",".join(trajectory_header(K))]
    for i, t in enumerate(traj.t):
        M = traj.M[i]
        row = [str(int(t))]
        row += [fmt(M[k, k]) for k in range(K)]
        row += [fmt(M[n, k]) for k in range(K) for n in range(K) if n != k]
        row += [fmt(a) for a in traj.alpha[i]]
        loss = traj.losses[i]
        row += [fmt(loss.L), fmt(loss.gap), traj.estimator]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def write_plotdata(traj: TrajectoryRecord, directory: Path) -> list[Path]:
    """Two-column ``x y`` files, one per curve."""
    K = traj.M.shape[1]
    curves = {f"A_{k + 1}": traj.M[:, k, k] for k in range(K)}
    for k in range(1, K):
        curves[f"B_{k + 1}_1"] = traj.M[:, 0, k]
    gaps = np.array([rep.conditional_gap for rep in traj.losses])
    for k in range(K):
        curves[f"cL_{k + 1}"] = np.array([rep.cL_k[k] for rep in traj.losses])
        curves[f"gap_{k + 1}"] = gaps[:, k]
    curves["loss_total"] = np.array([rep.L for rep in traj.losses])
    written = []
    for name, ys in curves.items():
        path = directory / f"{name}.dat"
        body = "".join(f"{int(t)} {fmt(y)}\n" for t, y in zip(traj.t, ys))
        write_text(path, "# t " + name + "\n" + body)
        written.append(path)
    return written

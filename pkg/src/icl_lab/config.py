"""Flat ``key = value`` run configuration files.

Grammar, one entry per line::

    # comment (also allowed after a value)
    key = value

Required keys: ``p``, ``N``, ``eta``, ``max_iters``. ``p`` is either a comma
separated probability vector or one of the presets ``balanced(K)`` and
``imbalanced(K, p1)``. Phase-threshold constants are overridden with
``threshold.<name> = value`` and sweeps are declared with ``sweep.K`` or
``sweep.eta`` (comma separated) plus, for ``sweep.K``, an optional
``sweep.N_per_K2`` that sets ``N = N_per_K2 * K^2``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from icl_lab.analysis import Thresholds
from icl_lab.features import TokenDistribution
from icl_lab.trainer import TrainConfig

EMIT_CHOICES = ("trajectory_csv", "phase_json", "loss_json", "plotdata")

_PRESET = re.compile(r"^(balanced|imbalanced)\s*\(([^)]*)\)$")


class ConfigError(ValueError):
    def __init__(self, message: str, path: str = "<config>", line: int | None = None):
        self.path, self.line = path, line
        where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


@dataclass
class RunConfig:
    train: TrainConfig
    output_dir: Path = Path("out")
    emit: tuple[str, ...] = EMIT_CHOICES
    epsilon: float = 0.01
    stop_on_gap: bool = True
    thresholds: Thresholds = field(default_factory=Thresholds)
    p_spec: str = ""
    sweep_axis: str | None = None
    sweep_values: tuple[float, ...] = ()
    sweep_N_per_K2: float | None = None

    @property
    def c(self) -> float:
        return self.train.event_c


_INT_KEYS = {"N", "max_iters", "d", "K", "samples", "budget", "record_every", "seed"}
_FLOAT_KEYS = {"eta", "epsilon", "c", "tail_tol"}
_STR_KEYS = {"estimator", "mode", "basis", "regime", "output_dir", "emit", "p", "stop_on_gap"}
_SWEEP_KEYS = {"sweep.K", "sweep.eta", "sweep.N_per_K2"}


def parse_distribution(spec: str, regime: str | None = None) -> TokenDistribution:
    m = _PRESET.match(spec.strip())
    if m:
        args = [a.strip() for a in m.group(2).split(",") if a.strip()]
        if m.group(1) == "balanced":
            if len(args) != 1:
                raise ValueError("balanced(K) takes one argument")
            return TokenDistribution.balanced(int(args[0]))
        if len(args) != 2:
            raise ValueError("imbalanced(K, p1) takes two arguments")
        return TokenDistribution.imbalanced(int(args[0]), float(args[1]))
    p = [float(x) for x in spec.split(",") if x.strip()]
    if regime:
        return TokenDistribution(p, regime)
    return TokenDistribution.infer(p)


def preset_for_K(spec: str, K: int) -> TokenDistribution:
    """Rebuild a preset distribution with a different number of features."""
    m = _PRESET.match(spec.strip())
    if not m:
        raise ValueError("sweeping K needs a balanced(K) or imbalanced(K, p1) preset")
    args = [a.strip() for a in m.group(2).split(",")]
    if m.group(1) == "balanced":
        return TokenDistribution.balanced(K)
    return TokenDistribution.imbalanced(K, float(args[1]))


def read_pairs(text: str, path: str = "<config>") -> dict[str, tuple[str, int]]:
    pairs: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", path, lineno)
        if key in pairs:
            raise ConfigError(f"duplicate key {key!r}", path, lineno)
        pairs[key] = (value, lineno)
    return pairs


def parse_config(text: str, path: str = "<config>") -> RunConfig:
    pairs = read_pairs(text, path)
    values: dict[str, object] = {}
    overrides: dict[str, float] = {}
    sweep: dict[str, tuple[float, ...]] = {}

    def fail(key, msg):
        raise ConfigError(msg, path, pairs[key][1] if key in pairs else None)

    for key, (raw, lineno) in pairs.items():
        try:
            if key in _INT_KEYS:
                values[key] = int(raw)
            elif key in _FLOAT_KEYS:
                values[key] = float(raw)
            elif key in _STR_KEYS:
                values[key] = raw
            elif key.startswith("threshold."):
                overrides[key.split(".", 1)[1]] = float(raw)
            elif key in _SWEEP_KEYS:
                sweep[key] = tuple(float(x) for x in raw.split(",") if x.strip())
            else:
                raise ConfigError(f"unknown key {key!r}", path, lineno)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key!r}: {raw!r}", path, lineno) from None

    for key in ("p", "N", "eta", "max_iters"):
        if key not in values:
            raise ConfigError(f"missing required key {key!r}", path)

    try:
        dist = parse_distribution(str(values["p"]), values.get("regime"))
    except ValueError as exc:
        fail("p", f"invalid distribution: {exc}")
    if "K" in values and values["K"] != dist.K:
        fail("K", f"K={values['K']} does not match the {dist.K} probabilities in p")

    train_kw = {
        k: values[k]
        for k in ("d", "estimator", "samples", "tail_tol", "budget", "mode", "basis",
                  "record_every", "seed", "c")
        if k in values
    }
    if "d" in values and values["d"] < dist.K:
        fail("d", f"d={values['d']} is smaller than K={dist.K}")
    for key in ("eta", "max_iters", "record_every", "N"):
        if key in values and values[key] <= 0 and not (key == "max_iters" and values[key] == 0):
            fail(key, f"{key} must be positive")
    epsilon = float(values.get("epsilon", 0.01))
    stop = str(values.get("stop_on_gap", "true")).lower()
    if stop not in ("true", "false", "1", "0", "yes", "no"):
        fail("stop_on_gap", "stop_on_gap must be true or false")
    stop_on_gap = stop in ("true", "1", "yes")
    try:
        train = TrainConfig(
            dist=dist,
            N=int(values["N"]),
            eta=float(values["eta"]),
            max_iters=int(values["max_iters"]),
            epsilon=epsilon if stop_on_gap else None,
            **train_kw,
        )
    except ValueError as exc:
        raise ConfigError(str(exc), path) from None

    emit = tuple(e.strip() for e in str(values.get("emit", ",".join(EMIT_CHOICES))).split(",") if e.strip())
    if not emit:
        fail("emit", "emit must name at least one artifact")
    for e in emit:
        if e not in EMIT_CHOICES:
            fail("emit", f"unknown artifact {e!r}; choose from {', '.join(EMIT_CHOICES)}")

    try:
        thresholds = Thresholds.from_overrides(overrides)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0]), path) from None

    axis, axis_values = None, ()
    axes = [k for k in ("sweep.K", "sweep.eta") if k in sweep]
    if len(axes) > 1:
        fail(axes[1], "only one sweep axis is supported")
    if axes:
        axis, axis_values = axes[0].split(".")[1], sweep[axes[0]]
        if axis == "K":
            if any(v != math.floor(v) or v < 1 for v in axis_values):
                fail("sweep.K", "sweep.K needs positive integers")
            if not _PRESET.match(str(values["p"]).strip()):
                fail("p", "sweep.K needs p given as a preset")
    n_per = sweep.get("sweep.N_per_K2")

    return RunConfig(
        train=train,
        output_dir=Path(str(values.get("output_dir", "out"))),
        emit=emit,
        epsilon=epsilon,
        stop_on_gap=stop_on_gap,
        thresholds=thresholds,
        p_spec=str(values["p"]),
        sweep_axis=axis,
        sweep_values=axis_values,
        sweep_N_per_K2=n_per[0] if n_per else None,
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return parse_config(text, str(path))


def sweep_configs(cfg: RunConfig) -> list[tuple[float, RunConfig]]:
    """Expand a sweep into one run configuration per axis value."""
    out = []
    for v in cfg.sweep_values:
        tr = cfg.train
        if cfg.sweep_axis == "K":
            K = int(v)
            dist = preset_for_K(cfg.p_spec, K)
            N = int(round(cfg.sweep_N_per_K2 * K * K)) if cfg.sweep_N_per_K2 else tr.N
            d = max(tr.d, K) if tr.d != tr.K else K
            tr = replace(tr, dist=dist, N=N, d=d, c=tr.c)
        else:
            tr = replace(tr, eta=float(v))
        out.append((v, replace(cfg, train=tr, sweep_axis=None, sweep_values=())))
    return out

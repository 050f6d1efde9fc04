"""Full-batch gradient descent on the population loss from zero initialization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from icl_lab.analysis import LossReport, report_from_totals
from icl_lab.attention import as_matrix, reduce
from icl_lab.errors import DimensionError, EnumerationTooLarge
from icl_lab.features import (
    DEFAULT_BUDGET,
    CountSupport,
    FeatureBasis,
    TokenDistribution,
    build_basis,
    default_event_constant,
    enumerate_support,
    event_mask,
    monte_carlo_support,
    truncated_support,
)
from icl_lab.gradients import GradientReport, full_gradient_on_support, support_totals

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    dist: TokenDistribution
    N: int
    eta: float
    max_iters: int
    d: int | None = None
    estimator: str = "auto"  # auto | exact | truncated | monte_carlo
    samples: int = 100_000
    tail_tol: float = 1e-16
    budget: int = DEFAULT_BUDGET
    mode: str = "reduced"  # reduced | full | both
    basis: str = "identity"
    record_every: int | None = None
    seed: int = 0
    epsilon: float | None = None
    c: float | None = None

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.record_every is None:
            self.record_every = 1 if self.max_iters <= 10_000 else 10
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")
        if self.d is None:
            self.d = self.K
        if self.d < self.K:
            raise DimensionError(f"d={self.d} is smaller than K={self.K}")
        if self.mode not in ("reduced", "full", "both"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.estimator not in ("auto", "exact", "truncated", "monte_carlo"):
            raise ValueError(f"unknown estimator {self.estimator!r}")

    @property
    def K(self) -> int:
        return self.dist.K

    @property
    def event_c(self) -> float:
        return default_event_constant(self.K, self.N) if self.c is None else self.c


@dataclass
class TrajectoryRecord:
    t: np.ndarray
    M: np.ndarray  # (records, K, K)
    alpha: np.ndarray
    beta: np.ndarray
    losses: list[LossReport]
    estimator: str
    samples: int = 0
    dropped_mass: float = 0.0
    status: str = "completed"  # completed | converged | aborted
    message: str = ""
    final_Q: np.ndarray | None = field(default=None, repr=False)

    @property
    def A(self) -> np.ndarray:
        return np.diagonal(self.M, axis1=1, axis2=2).copy()

    @property
    def B(self) -> np.ndarray:
        """``B[t, k, n] = B_{k,n}`` with zero diagonal."""
        B = np.swapaxes(self.M, 1, 2).copy()
        idx = np.arange(B.shape[1])
        B[:, idx, idx] = 0.0
        return B

    @property
    def final(self) -> np.ndarray:
        return self.M[-1]


def gd_step(M, report: GradientReport, eta: float) -> np.ndarray:
    """``A_k += eta * alpha_k`` and ``B_{k,n} += eta * beta_{k,n}``."""
    M = as_matrix(M)
    if report.alpha.shape != (M.shape[0],):
        raise ValueError("gradient report does not match the weights")
    return M + eta * report.as_update()


def build_support(config: TrainConfig) -> CountSupport:
    est = config.estimator
    if est == "monte_carlo":
        return monte_carlo_support(
            config.dist, config.N, config.samples, np.random.default_rng(config.seed)
        )
    if est == "truncated":
        return truncated_support(config.dist, config.N, config.tail_tol, config.budget)
    try:
        return enumerate_support(config.dist, config.N, config.budget)
    except EnumerationTooLarge:
        if est == "exact":
            raise
        log.info("enumeration over budget, switching to a Monte Carlo bank")
        return monte_carlo_support(
            config.dist, config.N, config.samples, np.random.default_rng(config.seed)
        )


class _Recorder:
    def __init__(self, K):
        self.t, self.M, self.alpha, self.beta, self.losses = [], [], [], [], []

    def add(self, t, M, alpha, beta, loss):
        self.t.append(t)
        self.M.append(M.copy())
        self.alpha.append(alpha)
        self.beta.append(beta)
        self.losses.append(loss)

    def build(self, support, status, message="", final_Q=None):
        return TrajectoryRecord(
            np.array(self.t, dtype=np.int64),
            np.array(self.M),
            np.array(self.alpha),
            np.array(self.beta),
            self.losses,
            support.kind,
            support.samples,
            support.dropped_mass,
            status,
            message,
            final_Q,
        )


def _evaluate(config, support, mask, M):
    tot = support_totals(support, config.dist.p, M, event=mask)
    loss = report_from_totals(tot, config.dist, config.N, config.event_c, support.kind)
    return tot, loss


def gd_run(
    config: TrainConfig,
    support: CountSupport | None = None,
    basis: FeatureBasis | None = None,
) -> TrajectoryRecord:
    """Train from zero weights and record the trajectory.

    Stops early once the loss gap reaches ``config.epsilon`` (when set). A
    non-finite weight aborts the run; the record up to that point is returned
    with ``status == "aborted"``.
    """
    if config.mode == "both":
        raise ValueError("use dual_mode_run for mode='both'")
    support = build_support(config) if support is None else support
    mask = event_mask(support.counts, config.dist, config.event_c)
    K = config.K
    full = config.mode == "full"
    if full and basis is None:
        basis = build_basis(config.d, K, config.seed, config.basis)
    Q = np.zeros((config.d, config.d)) if full else None
    M = np.zeros((K, K))
    rec = _Recorder(K)
    status, message = "completed", ""
    for t in range(config.max_iters + 1):
        tot, loss = _evaluate(config, support, mask, M)
        last = t == config.max_iters
        converged = config.epsilon is not None and loss.gap <= config.epsilon
        if t % config.record_every == 0 or last or converged:
            rec.add(t, M, tot.alpha, tot.beta, loss)
        if converged:
            status = "converged"
            break
        if last:
            break
        if full:
            G = full_gradient_on_support(support, config.dist.p, Q, basis)
            Q = Q - config.eta * G
            M_next = reduce(Q, basis).M
        else:
            report = GradientReport(tot.alpha, tot.beta, support.kind)
            M_next = gd_step(M, report, config.eta)
        if not np.all(np.isfinite(M_next)):
            status = "aborted"
            message = f"non-finite weights after step {t}"
            log.error(message)
            break
        M = M_next
    return rec.build(support, status, message, Q)


@dataclass
class DualModeResult:
    reduced: TrajectoryRecord
    full: TrajectoryRecord
    divergence: float


def dual_mode_run(config: TrainConfig, basis: FeatureBasis | None = None) -> DualModeResult:
    """Run the ``K x K`` and ``d x d`` trainers side by side and compare them."""
    if config.estimator == "monte_carlo":
        raise ValueError("dual-mode comparison needs an exact estimator")
    support = build_support(config)
    if support.kind == "monte_carlo":
        raise EnumerationTooLarge("dual-mode comparison needs exact enumeration")
    if basis is None:
        basis = build_basis(config.d, config.K, config.seed, config.basis)
    kw = {k: getattr(config, k) for k in config.__dataclass_fields__}
    reduced = gd_run(TrainConfig(**{**kw, "mode": "reduced"}), support)
    full = gd_run(TrainConfig(**{**kw, "mode": "full"}), support, basis)
    n = min(len(reduced.t), len(full.t))
    if n == 0:
        return DualModeResult(reduced, full, 0.0)
    div = float(np.max(np.abs(reduced.M[:n] - full.M[:n])))
    return DualModeResult(reduced, full, div)

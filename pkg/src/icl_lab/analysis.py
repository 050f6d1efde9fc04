"""Loss functionals, lower bounds, phase detection and post-training tests."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from icl_lab.attention import as_matrix, attention_profile, embed, forward, lift, profile_batch
from icl_lab.errors import EnumerationTooLarge, RegimeMismatch
from icl_lab.features import (
    DEFAULT_BUDGET,
    CountSupport,
    FeatureBasis,
    Prompt,
    TokenDistribution,
    default_event_constant,
    dominant_band,
    enumerate_support,
    event_mask,
    monte_carlo_support,
    multinomial_tail_bound,
)
from icl_lab.gradients import SupportTotals, support_totals

if TYPE_CHECKING:
    from icl_lab.trainer import TrajectoryRecord

DEFAULT_MC_SAMPLES = 100_000


@dataclass
class LossReport:
    """Population loss split per query feature, with its computable lower bounds.

    ``L_k`` and ``Ltilde_k`` carry the ``P(x_q = v_k)`` factor; ``cL_k`` and
    ``cLtilde_k`` are the same quantities conditioned on the query feature.
    """

    L: float
    L_k: np.ndarray
    Ltilde_k: np.ndarray
    Llow: float
    Llow_k: np.ndarray
    cL_k: np.ndarray
    cLtilde_k: np.ndarray
    Loi_k: np.ndarray
    regime: str
    c: float
    estimator: str = "exact"
    llow_applicable: bool = True
    L_k_std_err: np.ndarray | None = None

    @property
    def gap(self) -> float:
        """Distance to the lower bound used for the stopping rule."""
        if not self.llow_applicable:
            return self.L
        if self.regime == "imbalanced":
            return float(np.max(self.cL_k - self.Loi_k))
        return self.L - self.Llow

    @property
    def conditional_gap(self) -> np.ndarray:
        return self.cL_k - self.Loi_k

    def to_dict(self) -> dict:
        out = {}
        for key, val in asdict(self).items():
            out[key] = val.tolist() if isinstance(val, np.ndarray) else val
        out["gap"] = self.gap
        return out


def unseen_probability(p: np.ndarray, N: int) -> np.ndarray:
    """``P(n_k = 0) = (1 - p_k)^N`` evaluated in log space."""
    with np.errstate(divide="ignore"):
        return np.exp(N * np.log1p(-np.asarray(p, dtype=float)))


def lower_bounds(dist: TokenDistribution, N: int):
    """``(Llow, Llow_k, Loi_k)``; NaN when K = 1 where the bound is undefined."""
    K = dist.K
    if K == 1:
        nan = np.full(1, np.nan)
        return math.nan, nan, nan.copy()
    scale = 0.5 * (1.0 + 1.0 / (K - 1))
    loi = scale * unseen_probability(dist.p, N)
    llow_k = dist.p * loi
    return float(llow_k.sum()), llow_k, loi


def report_from_totals(
    tot: SupportTotals,
    dist: TokenDistribution,
    N: int,
    c: float,
    estimator: str = "exact",
    samples: int = 0,
) -> LossReport:
    Llow, Llow_k, Loi_k = lower_bounds(dist, N)
    p = dist.p
    L_k = tot.loss
    Ltilde_k = tot.loss_event if tot.loss_event is not None else np.full_like(L_k, np.nan)
    std = None
    if tot.loss_sq is not None and samples > 1:
        var = np.maximum(tot.loss_sq - L_k**2, 0.0) * samples / (samples - 1)
        std = np.sqrt(var / samples)
    return LossReport(
        L=float(L_k.sum()),
        L_k=L_k,
        Ltilde_k=Ltilde_k,
        Llow=Llow,
        Llow_k=Llow_k,
        cL_k=L_k / p,
        cLtilde_k=Ltilde_k / p,
        Loi_k=Loi_k,
        regime=dist.regime,
        c=c,
        estimator=estimator,
        llow_applicable=dist.K > 1,
        L_k_std_err=std,
    )


def loss_report(
    dist: TokenDistribution,
    N: int,
    M,
    c: float | None = None,
    support: CountSupport | None = None,
    budget: int = DEFAULT_BUDGET,
    rng=None,
) -> LossReport:
    """Evaluate every loss functional at weights ``M``.

    Uses exact enumeration when it fits ``budget`` and otherwise a Monte Carlo
    bank of ``DEFAULT_MC_SAMPLES`` prompts.
    """
    if c is None:
        c = default_event_constant(dist.K, N)
    if support is None:
        try:
            support = enumerate_support(dist, N, budget)
        except EnumerationTooLarge:
            support = monte_carlo_support(
                dist, N, DEFAULT_MC_SAMPLES, np.random.default_rng(rng)
            )
    mc = support.kind == "monte_carlo"
    mask = event_mask(support.counts, dist, c)
    tot = support_totals(support, dist.p, M, event=mask, second_moments=mc)
    return report_from_totals(tot, dist, N, c, support.kind, support.samples)


# --------------------------------------------------------------------------
# phase detection


@dataclass
class Thresholds:
    """Constants of the phase predicates; defaults are the theory's literal values.

    ``log_k`` replaces ``log K`` when set.
    """

    log_k: float | None = None
    balanced_phase1: float = 1.0
    balanced_stage: float = 3.0
    imb_phase1: float = 0.49
    imb_phase2: float = 1.01
    imb_phase3: float = 1.0
    imb_phase4_stage: float = 3.0
    imb_phase4_exponent: float = 0.51
    imb_phase4_e: float = math.e
    dominant_stage: float = 2.0
    dominant_band: float = 0.01
    conc: float = 3.0

    @classmethod
    def from_overrides(cls, overrides: dict | None) -> "Thresholds":
        th = cls()
        for key, val in (overrides or {}).items():
            if not hasattr(th, key):
                raise KeyError(f"unknown threshold {key!r}")
            setattr(th, key, float(val))
        return th


@dataclass
class PhaseBoundary:
    t: int
    threshold: float
    completed: bool
    ambiguous: bool = False
    first_exit: int | None = None
    applicable: bool = True


@dataclass
class PhaseReport:
    regime: str
    horizon: int
    epsilon: float
    c: float
    features: dict[int, dict[str, PhaseBoundary]] = field(default_factory=dict)
    converged_at: dict[int, int | None] = field(default_factory=dict)

    def boundary(self, k: int, name: str) -> PhaseBoundary:
        return self.features[k][name]

    def to_dict(self) -> dict:
        return {
            "regime": self.regime,
            "horizon": self.horizon,
            "epsilon": self.epsilon,
            "c": self.c,
            "features": {
                str(k + 1): {name: asdict(b) for name, b in phases.items()}
                for k, phases in self.features.items()
            },
            "converged_at": {str(k + 1): v for k, v in self.converged_at.items()},
        }


def last_below(ts: np.ndarray, pred: np.ndarray, threshold: float, after: int | None = None) -> PhaseBoundary:
    """Final recorded ``t`` (after ``after``) at which ``pred`` holds.

    Mirrors ``max{t : predicate}``. If the predicate turns true again after
    failing, the boundary is flagged ambiguous and the end of the first run of
    true values is reported as ``first_exit``.
    """
    horizon = int(ts[-1])
    if not np.isfinite(threshold):
        return PhaseBoundary(horizon, threshold, completed=False, applicable=False)
    window = ts > after if after is not None else np.ones_like(pred, dtype=bool)
    idx = np.flatnonzero(window)
    if idx.size == 0:
        start = horizon if after is None else after
        return PhaseBoundary(start, threshold, completed=False)
    wp = pred[idx]
    start = int(after) if after is not None else int(ts[idx[0]])
    true_pos = np.flatnonzero(wp)
    if true_pos.size == 0:
        # predicate already fails on entry: the phase is empty
        return PhaseBoundary(start, threshold, completed=True, first_exit=start)
    last = int(true_pos[-1])
    false_pos = np.flatnonzero(~wp)
    first_false = int(false_pos[0]) if false_pos.size else None
    ambiguous = first_false is not None and first_false < last
    first_exit = None
    if first_false is not None:
        first_exit = int(ts[idx[first_false - 1]]) if first_false > 0 else start
    return PhaseBoundary(
        int(ts[idx[last]]),
        threshold,
        completed=last < idx.size - 1,
        ambiguous=ambiguous,
        first_exit=first_exit,
    )


def _safe_log(x: float) -> float:
    return math.log(x) if x > 0 and np.isfinite(x) else math.nan


def _max_cross(M: np.ndarray, k: int) -> np.ndarray:
    """``max_{m != k} M[m, k]`` along a trajectory of shape ``(T, K, K)``."""
    col = np.delete(M[:, :, k], k, axis=1)
    return col.max(axis=1)


def _gaps(traj: "TrajectoryRecord") -> np.ndarray:
    return np.array([rep.conditional_gap for rep in traj.losses])


def _converged_at(traj, eps: float) -> dict[int, int | None]:
    gaps = _gaps(traj)
    out = {}
    for k in range(gaps.shape[1]):
        hit = np.flatnonzero(gaps[:, k] <= eps)
        out[k] = int(traj.t[hit[0]]) if hit.size else None
    return out


def detect_phases_balanced(
    traj: "TrajectoryRecord",
    dist: TokenDistribution,
    N: int,
    eps: float,
    c: float | None = None,
    thresholds: Thresholds | None = None,
) -> PhaseReport:
    th = thresholds or Thresholds()
    K = dist.K
    c = default_event_constant(K, N) if c is None else c
    logK = th.log_k if th.log_k is not None else math.log(K)
    ts, M = traj.t, traj.M
    report = PhaseReport("balanced", int(ts[-1]), eps, c)
    gaps = _gaps(traj)
    for k in range(K):
        A = M[:, k, k]
        b1 = last_below(ts, A <= th.balanced_phase1 * logK, th.balanced_phase1 * logK)
        lo_k = dist.p[k] * K - c
        thr2 = _safe_log((K / lo_k - 1.0) * (math.sqrt(th.balanced_stage / eps) - 1.0)) if lo_k > 0 else math.nan
        margin = A - _max_cross(M, k) if K > 1 else A
        b2t = last_below(ts, margin <= thr2, thr2, after=b1.t)
        after = b2t.t if b2t.applicable else b1.t
        b2 = last_below(ts, gaps[:, k] > eps, eps, after=after)
        report.features[k] = {"T1": b1, "T2tilde": b2t, "T2": b2}
    report.converged_at = _converged_at(traj, eps)
    return report


def detect_phases_imbalanced(
    traj: "TrajectoryRecord",
    dist: TokenDistribution,
    N: int,
    eps: float,
    c: float | None = None,
    thresholds: Thresholds | None = None,
) -> PhaseReport:
    if dist.regime != "imbalanced":
        raise RegimeMismatch(f"imbalanced detector given a {dist.regime} distribution")
    th = thresholds or Thresholds()
    K = dist.K
    c = default_event_constant(K, N) if c is None else c
    logK = th.log_k if th.log_k is not None else math.log(K)
    ts, M = traj.t, traj.M
    p = dist.p
    band = dominant_band(K, th.dominant_band)
    lo1 = p[0] - band * c
    hi1 = p[0] + band * c
    report = PhaseReport("imbalanced", int(ts[-1]), eps, c)

    thr_dom = _safe_log((1.0 / lo1 - 1.0) * (math.sqrt(th.dominant_stage / eps) - 1.0)) if lo1 > 0 else math.nan
    margin1 = M[:, 0, 0] - _max_cross(M, 0)
    report.features[0] = {"T1star": last_below(ts, margin1 <= thr_dom, thr_dom)}

    for k in range(1, K):
        A = M[:, k, k]
        B1 = M[:, 0, k]
        thr1 = -th.imb_phase1 * logK
        b1 = last_below(ts, B1 >= thr1, thr1)
        thr2 = th.imb_phase2 * logK
        b2 = last_below(ts, A - B1 <= thr2, thr2, after=b1.t)
        thr3 = th.imb_phase3 * logK
        b3 = last_below(ts, A <= thr3, thr3, after=b2.t)
        lo_k = p[k] * K - c
        if lo_k > 0 and lo1 > 0:
            num = th.imb_phase4_e * (1.0 - lo1) * K + hi1 * K**th.imb_phase4_exponent
            thr4 = _safe_log((num / lo_k - 1.0) * (math.sqrt(th.imb_phase4_stage / eps) - 1.0))
        else:
            thr4 = math.nan
        b4 = last_below(ts, A <= thr4, thr4, after=b3.t)
        report.features[k] = {"T1": b1, "T2": b2, "T3": b3, "T4": b4}
    report.converged_at = _converged_at(traj, eps)
    return report


# --------------------------------------------------------------------------
# post-training tests


@dataclass
class ConcentrationReport:
    pass_rate: np.ndarray
    members: int
    trials: int
    miss_frequency: float
    tail_bound: float
    threshold: float
    min_attention: np.ndarray

    def to_dict(self) -> dict:
        return {
            key: (val.tolist() if isinstance(val, np.ndarray) else val)
            for key, val in asdict(self).items()
        }


def attention_concentration(
    M,
    dist: TokenDistribution,
    N: int,
    eps: float,
    trials: int,
    rng,
    c: float | None = None,
    conc: float = 3.0,
) -> ConcentrationReport:
    """Fraction of event-member prompts with ``(1 - Attn_k)^2 <= conc * eps``, per k."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    M = as_matrix(M)
    K = dist.K
    c = default_event_constant(K, N) if c is None else c
    rng = np.random.default_rng(rng)
    draws = rng.multinomial(N, dist.p, size=trials)
    member = event_mask(draws, dist, c)
    kept = draws[member]
    rates = np.full(K, np.nan)
    lowest = np.full(K, np.nan)
    if kept.shape[0]:
        for k in range(K):
            ak = profile_batch(kept, k, M)[:, k]
            rates[k] = np.mean((1.0 - ak) ** 2 <= conc * eps)
            lowest[k] = ak.min()
    return ConcentrationReport(
        pass_rate=rates,
        members=int(member.sum()),
        trials=trials,
        miss_frequency=float(1.0 - member.mean()),
        tail_bound=multinomial_tail_bound(N, K, c),
        threshold=conc * eps,
        min_attention=lowest,
    )


@dataclass
class ICLReport:
    errors: np.ndarray
    bounds: np.ndarray
    mean_error: float
    max_error: float
    scale: float


def icl_test(
    M,
    basis: FeatureBasis,
    w_test: np.ndarray,
    query_k: int,
    dist: TokenDistribution,
    N: int,
    trials: int,
    rng,
) -> ICLReport:
    """Prediction error on fresh prompts labelled by an arbitrary task vector.

    ``bounds`` holds ``(1 - Attn_k) * max_m |<w, v_k - v_m>|`` per trial,
    which dominates the error whenever the prediction identity holds.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    M = as_matrix(M)
    Q = lift(M, basis)
    rng = np.random.default_rng(rng)
    w_test = np.asarray(w_test, dtype=float)
    proj = basis.V.T @ w_test
    scale = float(np.max(np.abs(proj[query_k] - proj)))
    errors = np.empty(trials)
    bounds = np.empty(trials)
    for i in range(trials):
        tokens = rng.choice(dist.K, size=N, p=dist.p)
        prompt = Prompt(tokens, query_k, w_test)
        y_hat = forward(embed(prompt, basis), Q)
        errors[i] = abs(y_hat - proj[query_k])
        prof = attention_profile(prompt.counts(dist.K), query_k, M)
        bounds[i] = (1.0 - prof.scores[query_k]) * scale
    return ICLReport(errors, bounds, float(errors.mean()), float(errors.max()), scale)

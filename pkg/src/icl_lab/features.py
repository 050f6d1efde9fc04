"""Feature bases, token distributions and prompt count vectors.

Everything the attention dynamics need from a prompt is its count vector
``n = (n_1, ..., n_K)``, so most of this module is about producing count
vectors: one at a time (sampling), as a full weighted support (exact
enumeration), as a pruned support, or as a Monte Carlo bank.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterator, Literal

import numpy as np
from scipy.special import gammaln
from scipy.stats import binom

from icl_lab.errors import DimensionError, EnumerationTooLarge

DEFAULT_BUDGET = 2_000_000
DEFAULT_RATIO_BOUND = 4.0

Regime = Literal["balanced", "imbalanced", "custom"]


@dataclass(frozen=True)
class FeatureBasis:
    """``K`` orthonormal feature vectors stored as the columns of ``V`` (d x K)."""

    V: np.ndarray

    @property
    def d(self) -> int:
        return self.V.shape[0]

    @property
    def K(self) -> int:
        return self.V.shape[1]

    def gram_error(self) -> float:
        return float(np.abs(self.V.T @ self.V - np.eye(self.K)).max())


def build_basis(d: int, K: int, seed: int = 0, mode: str = "identity") -> FeatureBasis:
    if not 1 <= K <= d:
        raise DimensionError(f"need 1 <= K <= d, got K={K}, d={d}")
    if mode == "identity":
        V = np.eye(d)[:, :K]
    elif mode == "random_orthonormal":
        G = np.random.default_rng(seed).standard_normal((d, K))
        Qm, R = np.linalg.qr(G)
        # sign convention makes the factorization unique
        V = Qm * np.sign(np.diag(R))
    else:
        raise ValueError(f"unknown basis mode {mode!r}")
    return FeatureBasis(np.ascontiguousarray(V))


@dataclass(frozen=True)
class TokenDistribution:
    """Feature sampling probabilities ``p`` with a regime tag."""

    p: np.ndarray
    regime: Regime = "custom"
    ratio_bound: float = DEFAULT_RATIO_BOUND

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        object.__setattr__(self, "p", p)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("p must be a non-empty vector")
        # K = 1 is the degenerate single-feature case with p = (1,)
        if not (np.all((p > 0) & (p < 1)) or (p.size == 1 and p[0] == 1.0)):
            raise ValueError("each p_k must lie in (0, 1)")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"p must sum to 1, got {p.sum()!r}")
        if self.regime == "balanced":
            if p.max() / p.min() > self.ratio_bound:
                raise ValueError(
                    f"balanced regime needs max p / min p <= {self.ratio_bound}"
                )
        elif self.regime == "imbalanced":
            if p.size < 2 or not np.all(p[0] > p[1:]):
                raise ValueError("imbalanced regime needs p_1 > p_k for all k > 1")
        elif self.regime != "custom":
            raise ValueError(f"unknown regime {self.regime!r}")

    @property
    def K(self) -> int:
        return self.p.size

    @classmethod
    def balanced(cls, K: int) -> "TokenDistribution":
        return cls(np.full(K, 1.0 / K), "balanced")

    @classmethod
    def imbalanced(cls, K: int, p1: float) -> "TokenDistribution":
        if not 0 < p1 < 1 or K < 2:
            raise ValueError("imbalanced preset needs K >= 2 and 0 < p1 < 1")
        rest = np.full(K - 1, (1.0 - p1) / (K - 1))
        return cls(np.concatenate([[p1], rest]), "imbalanced")

    @classmethod
    def infer(cls, p, ratio_bound: float = DEFAULT_RATIO_BOUND) -> "TokenDistribution":
        """Tag ``p`` as balanced, imbalanced or custom from its shape."""
        p = np.asarray(p, dtype=float)
        if np.ptp(p) < 1e-15:
            regime = "balanced"
        elif p.size >= 2 and np.all(p[0] > p[1:]):
            regime = "imbalanced"
        elif p.max() / p.min() <= ratio_bound:
            regime = "balanced"
        else:
            regime = "custom"
        return cls(p, regime, ratio_bound)


@dataclass(frozen=True)
class PromptCounts:
    """Per-feature token counts of a prompt."""

    n: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.n, dtype=np.int64)
        if n.ndim != 1 or np.any(n < 0):
            raise ValueError("counts must be a vector of nonnegative integers")
        object.__setattr__(self, "n", n)

    @property
    def N(self) -> int:
        return int(self.n.sum())

    @property
    def K(self) -> int:
        return self.n.size


@dataclass
class Prompt:
    tokens: np.ndarray
    query: int
    w: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.w is not None:
            self.w = np.asarray(self.w, dtype=float)
            if not np.all(np.isfinite(self.w)):
                raise ValueError("task vector must be finite")

    def counts(self, K: int) -> PromptCounts:
        return PromptCounts(np.bincount(self.tokens, minlength=K))


def sample_prompt(dist: TokenDistribution, N: int, query: int, rng, w=None) -> Prompt:
    tokens = rng.choice(dist.K, size=N, p=dist.p)
    return Prompt(tokens, query, w)


def sample_counts(dist: TokenDistribution, N: int, rng: np.random.Generator) -> PromptCounts:
    if N < 1:
        raise ValueError("N must be >= 1")
    return PromptCounts(rng.multinomial(N, dist.p))


def composition_count(K: int, N: int) -> int:
    """Number of count vectors of length ``K`` summing to ``N``."""
    return math.comb(N + K - 1, K - 1)


def log_multinomial_pmf(counts: np.ndarray, p: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts)
    N = counts.sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(counts > 0, counts * np.log(p), 0.0)
    return gammaln(N + 1) - gammaln(counts + 1).sum(axis=-1) + terms.sum(axis=-1)


def _chain_expand(p: np.ndarray, N: int, log_tol: float, budget: int):
    """Grow count vectors coordinate by coordinate through conditional binomials.

    Prefixes whose marginal log-probability falls below ``log_tol`` are dropped
    together with all their completions; the dropped mass is returned.
    """
    K = p.size
    prefix = np.zeros((1, 0), dtype=np.int64)
    logm = np.zeros(1)
    rem = np.array([N], dtype=np.int64)
    dropped = 0.0
    for j in range(K - 1):
        q = min(1.0, p[j] / p[j:].sum())
        lens = rem + 1
        total = int(lens.sum())
        if total > 4 * budget + 1_000_000:
            raise EnumerationTooLarge(
                f"count enumeration grew to {total} candidates; use Monte Carlo"
            )
        rows = np.repeat(np.arange(rem.size), lens)
        starts = np.repeat(np.cumsum(lens) - lens, lens)
        kk = np.arange(total) - starts
        lj = logm[rows] + binom.logpmf(kk, rem[rows], q)
        keep = lj >= log_tol
        if not keep.all():
            dropped += float(np.exp(lj[~keep]).sum())
        rows, kk, lj = rows[keep], kk[keep], lj[keep]
        prefix = np.column_stack([prefix[rows], kk])
        logm = lj
        rem = rem[rows] - kk
        if rem.size > budget:
            raise EnumerationTooLarge(
                f"retained support of {rem.size} count vectors exceeds budget {budget}"
            )
    return np.column_stack([prefix, rem]), dropped


@dataclass
class CountSupport:
    """Weighted set of count vectors standing in for the multinomial law.

    ``kind`` is ``exact`` (every composition), ``truncated`` (compositions of
    negligible probability removed, ``dropped_mass`` records how much) or
    ``monte_carlo`` (distinct sampled vectors weighted by multiplicity).
    """

    counts: np.ndarray
    weights: np.ndarray
    kind: str
    N: int
    samples: int = 0
    dropped_mass: float = 0.0
    multiplicity: np.ndarray | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.weights.size


def enumerate_support(
    dist: TokenDistribution, N: int, budget: int = DEFAULT_BUDGET
) -> CountSupport:
    size = composition_count(dist.K, N)
    if size > budget:
        raise EnumerationTooLarge(
            f"{size} count vectors exceed the enumeration budget {budget}; "
            "use the Monte Carlo estimator"
        )
    counts, _ = _chain_expand(dist.p, N, -np.inf, budget)
    weights = np.exp(log_multinomial_pmf(counts, dist.p))
    return CountSupport(counts, weights, "exact", N)


def truncated_support(
    dist: TokenDistribution, N: int, tol: float = 1e-16, budget: int = DEFAULT_BUDGET
) -> CountSupport:
    """Enumerate count vectors, skipping regions of probability below ``tol``.

    Expectations of integrands bounded by ``B`` are off by at most
    ``B * dropped_mass``.
    """
    counts, dropped = _chain_expand(dist.p, N, math.log(tol), budget)
    weights = np.exp(log_multinomial_pmf(counts, dist.p))
    kind = "truncated" if dropped > 0 else "exact"
    return CountSupport(counts, weights, kind, N, dropped_mass=dropped)


def monte_carlo_support(
    dist: TokenDistribution, N: int, samples: int, rng: np.random.Generator
) -> CountSupport:
    draws = rng.multinomial(N, dist.p, size=samples)
    uniq, mult = np.unique(draws, axis=0, return_counts=True)
    return CountSupport(
        uniq, mult / samples, "monte_carlo", N, samples=samples, multiplicity=mult
    )


def enumerate_counts(
    K: int, N: int, p=None, budget: int = DEFAULT_BUDGET
) -> Iterator[tuple[PromptCounts, float]]:
    """Yield every count vector with its multinomial probability.

    ``p`` defaults to the uniform distribution over ``K`` features.
    """
    p = np.full(K, 1.0 / K) if p is None else np.asarray(p, dtype=float)
    if p.size != K:
        raise DimensionError("p must have K entries")
    support = enumerate_support(TokenDistribution(p), N, budget)
    for row, w in zip(support.counts, support.weights):
        yield PromptCounts(row), float(w)


def default_event_constant(K: int, N: int) -> float:
    """Smallest admissible event constant, sqrt(20 K^3 / N)."""
    return math.sqrt(20.0 * K**3 / N)


def dominant_band(K: int, band: float | None = None) -> float:
    """Half-width factor of the dominant-feature interval ``p_1 +- band * c``.

    The interval must contain ``p_1 +- c / K`` for the tail bound to cover
    the event, so the literal factor 0.01 is widened to ``1 / K`` below
    K = 100.
    """
    return max(0.01, 1.0 / K) if band is None else band


def event_intervals(
    dist: TokenDistribution, N: int, c: float, band: float | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature count intervals ``[lo_k, hi_k]`` of the high-probability event."""
    p, K = dist.p, dist.K
    lo = (p * K - c) * N / K
    hi = (p * K + c) * N / K
    if dist.regime == "imbalanced":
        b = dominant_band(K, band)
        lo[0] = (p[0] - b * c) * N
        hi[0] = (p[0] + b * c) * N
    return lo, hi


def event_mask(
    counts: np.ndarray, dist: TokenDistribution, c: float, band: float | None = None
) -> np.ndarray:
    counts = np.atleast_2d(counts)
    N = counts[0].sum()
    lo, hi = event_intervals(dist, N, c, band)
    return np.all((counts >= lo) & (counts <= hi), axis=-1)


@dataclass(frozen=True)
class EventReport:
    member: bool
    lower: np.ndarray
    upper: np.ndarray
    admissible: bool


def event_membership(
    counts: PromptCounts, dist: TokenDistribution, c: float, band: float | None = None
) -> EventReport:
    n = counts.n if isinstance(counts, PromptCounts) else np.asarray(counts)
    N, K = int(n.sum()), n.size
    admissible = c >= default_event_constant(K, N) * (1 - 1e-12)
    if not admissible:
        warnings.warn(
            f"event constant c={c:.4g} is below sqrt(20K^3/N)="
            f"{default_event_constant(K, N):.4g}; the tail bound need not hold",
            stacklevel=2,
        )
    lo, hi = event_intervals(dist, N, c, band)
    member = bool(np.all((n >= lo) & (n <= hi)))
    return EventReport(member, lo, hi, admissible)


def multinomial_tail_bound(N: int, K: int, c: float) -> float:
    return min(1.0, 3.0 * math.exp(-(c**2) * N / (25.0 * K**2)))

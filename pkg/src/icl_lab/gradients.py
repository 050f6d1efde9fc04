"""Population loss and gradients of the bilinear attention weights.

The task vector is integrated out analytically (its second moment is the
identity) and so is the query feature (a ``p_k``-weighted sum over ``k``).
What remains is an expectation over the prompt count vector, evaluated on a
:class:`~icl_lab.features.CountSupport` or by blockwise Monte Carlo.

Sign convention: ``alpha[k]`` and ``beta[k, n]`` are the *negative* projected
gradients, so one GD step adds ``eta * alpha[k]`` to ``M[k, k]`` and
``eta * beta[k, n]`` to ``M[n, k]``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from icl_lab.attention import as_matrix, profile_batch
from icl_lab.errors import DimensionError
from icl_lab.features import (
    DEFAULT_BUDGET,
    CountSupport,
    FeatureBasis,
    PromptCounts,
    TokenDistribution,
    enumerate_support,
)

MC_BLOCK = 1 << 15


@dataclass
class GradientReport:
    alpha: np.ndarray
    beta: np.ndarray
    estimator: str
    samples: int = 0
    std_err: np.ndarray | None = None
    full_grad: np.ndarray | None = None
    dropped_mass: float = 0.0

    def as_update(self) -> np.ndarray:
        """The ascent direction in ``M`` coordinates: ``diag(alpha) + beta^T``."""
        D = self.beta.T.copy()
        np.fill_diagonal(D, self.alpha)
        return D


def query_terms(counts: np.ndarray, k: int, M: np.ndarray):
    """Per-count attention, loss and gradient integrands for query feature ``k``.

    Returns ``(attn, loss, a, b)`` with shapes ``(S, K), (S,), (S,), (S, K)``;
    ``b[:, k]`` is zero.
    """
    attn = profile_batch(counts, k, M)
    ak = attn[:, k]
    miss = 1.0 - ak
    cross = np.einsum("sm,sm->s", attn, attn) - ak * ak
    loss = 0.5 * (miss * miss + cross)
    a = 2.0 * ak * loss
    b = attn * ((cross - ak * miss)[:, None] - attn)
    b[:, k] = 0.0
    return attn, loss, a, b


def _counts_vector(counts) -> np.ndarray:
    return counts.n if isinstance(counts, PromptCounts) else np.asarray(counts)


def per_count_loss(counts, query_k: int, M) -> float:
    n = _counts_vector(counts)
    return float(query_terms(n[None, :], query_k, as_matrix(M))[1][0])


def per_count_integrands(counts, query_k: int, M) -> tuple[float, np.ndarray]:
    n = _counts_vector(counts)
    _, _, a, b = query_terms(n[None, :], query_k, as_matrix(M))
    return float(a[0]), b[0]


@dataclass
class SupportTotals:
    """Expectations accumulated over a count support for every query feature."""

    alpha: np.ndarray
    beta: np.ndarray
    loss: np.ndarray  # L_k, already weighted by p_k
    loss_event: np.ndarray | None = None
    alpha_sq: np.ndarray | None = None
    beta_sq: np.ndarray | None = None
    loss_sq: np.ndarray | None = None


def support_totals(
    support: CountSupport,
    p: np.ndarray,
    M,
    event: np.ndarray | None = None,
    second_moments: bool = False,
) -> SupportTotals:
    """Weighted sums of ``p_k``-scaled integrands over ``support``.

    With ``second_moments`` the weighted sums of squares are returned too
    (used for Monte Carlo standard errors).
    """
    M = as_matrix(M)
    K = p.size
    w = support.weights
    alpha = np.zeros(K)
    beta = np.zeros((K, K))
    loss = np.zeros(K)
    loss_event = None if event is None else np.zeros(K)
    if second_moments:
        alpha_sq, beta_sq, loss_sq = np.zeros(K), np.zeros((K, K)), np.zeros(K)
    for k in range(K):
        _, ell, a, b = query_terms(support.counts, k, M)
        alpha[k] = p[k] * (w @ a)
        beta[k] = p[k] * (w @ b)
        loss[k] = p[k] * (w @ ell)
        if event is not None:
            loss_event[k] = p[k] * (w @ (ell * event))
        if second_moments:
            alpha_sq[k] = p[k] ** 2 * (w @ (a * a))
            beta_sq[k] = p[k] ** 2 * (w @ (b * b))
            loss_sq[k] = p[k] ** 2 * (w @ (ell * ell))
    out = SupportTotals(alpha, beta, loss, loss_event)
    if second_moments:
        out.alpha_sq, out.beta_sq, out.loss_sq = alpha_sq, beta_sq, loss_sq
    return out


def _std_err(mean, mean_sq, samples: int) -> np.ndarray:
    if samples < 2:
        return np.full_like(mean, np.nan)
    var = np.maximum(mean_sq - mean * mean, 0.0) * samples / (samples - 1)
    return np.sqrt(var / samples)


def population_gradient(dist: TokenDistribution, M, support: CountSupport) -> GradientReport:
    """Gradient report for a precomputed support (exact, truncated or sampled)."""
    mc = support.kind == "monte_carlo"
    tot = support_totals(support, dist.p, M, second_moments=mc)
    std_err = None
    if mc:
        std_err = _std_err(tot.beta, tot.beta_sq, support.samples)
        np.fill_diagonal(std_err, _std_err(tot.alpha, tot.alpha_sq, support.samples))
    return GradientReport(
        tot.alpha,
        tot.beta,
        support.kind,
        samples=support.samples,
        std_err=std_err,
        dropped_mass=support.dropped_mass,
    )


def population_gradient_exact(
    dist: TokenDistribution, N: int, M, budget: int = DEFAULT_BUDGET
) -> GradientReport:
    return population_gradient(dist, M, enumerate_support(dist, N, budget))


def _mc_block(p, N, M, size, seed):
    rng = np.random.default_rng(seed)
    draws = rng.multinomial(N, p, size=size)
    K = p.size
    s1 = np.zeros((K, K))
    s2 = np.zeros((K, K))
    for k in range(K):
        _, _, a, b = query_terms(draws, k, M)
        b[:, k] = a
        x = p[k] * b  # column n holds beta[k, n]; column k holds alpha[k]
        s1[k] = x.sum(axis=0)
        s2[k] = (x * x).sum(axis=0)
    return s1, s2


def population_gradient_mc(
    dist: TokenDistribution,
    N: int,
    M,
    samples: int,
    rng,
    workers: int | None = None,
    block: int = MC_BLOCK,
) -> GradientReport:
    """Monte Carlo gradient with standard errors.

    Samples are split into fixed blocks, each seeded from one draw of ``rng``
    through ``SeedSequence.spawn``; block sums are combined with ``math.fsum``
    so the result does not depend on ``workers``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    M = as_matrix(M)
    p, K = dist.p, dist.K
    rng = np.random.default_rng(rng)
    base = int(rng.integers(2**63))
    sizes = [block] * (samples // block) + ([samples % block] if samples % block else [])
    seeds = np.random.SeedSequence(base).spawn(len(sizes))
    args = [(p, N, M, s, sd) for s, sd in zip(sizes, seeds)]
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(lambda a: _mc_block(*a), args))
    else:
        parts = [_mc_block(*a) for a in args]
    s1 = np.stack([q[0] for q in parts])
    s2 = np.stack([q[1] for q in parts])
    mean = np.empty((K, K))
    mean_sq = np.empty((K, K))
    for i in range(K):
        for j in range(K):
            mean[i, j] = math.fsum(s1[:, i, j]) / samples
            mean_sq[i, j] = math.fsum(s2[:, i, j]) / samples
    alpha = np.diag(mean).copy()
    beta = mean.copy()
    np.fill_diagonal(beta, 0.0)
    std_err = _std_err(mean, mean_sq, samples)
    return GradientReport(alpha, beta, "monte_carlo", samples=samples, std_err=std_err)


def full_gradient_on_support(
    support: CountSupport, p: np.ndarray, Q: np.ndarray, basis: FeatureBasis
) -> np.ndarray:
    """``grad_Q L`` assembled in ambient coordinates.

    Per count vector and query feature ``k`` the integrand is
    ``sum_m Attn_m <u - v_k, v_m> (v_m - u) v_k^T`` with ``u = sum_m Attn_m v_m``.
    """
    V = basis.V
    Q = np.asarray(Q, dtype=float)
    if Q.shape != (basis.d, basis.d):
        raise DimensionError(f"Q must be {basis.d}x{basis.d}")
    # attention logits only see Q through v_m^T Q v_k
    logits = V.T @ Q @ V
    G = np.zeros_like(Q)
    w = support.weights
    for k in range(basis.K):
        attn = profile_batch(support.counts, k, logits)
        U = attn @ V.T
        R = U - V[:, k]
        C = attn * (R @ V)
        g = C @ V.T - C.sum(axis=1, keepdims=True) * U
        G += p[k] * np.outer(w @ g, V[:, k])
    return G


def full_q_gradient(
    dist: TokenDistribution,
    N: int,
    Q: np.ndarray,
    basis: FeatureBasis,
    budget: int = DEFAULT_BUDGET,
    support: CountSupport | None = None,
) -> np.ndarray:
    if support is None:
        support = enumerate_support(dist, N, budget)
    return full_gradient_on_support(support, dist.p, Q, basis)


def _loss_hp(n: np.ndarray, k: int, M: np.ndarray, dtype) -> np.floating:
    n = n.astype(dtype)
    with np.errstate(divide="ignore"):
        lg = np.log(n) + M[:, k].astype(dtype)
    e = np.exp(lg - lg.max())
    attn = e / e.sum()
    cross = (attn * attn).sum() - attn[k] ** 2
    return (dtype(1) - attn[k]) ** 2 / 2 + cross / 2


def finite_diff_check(counts, query_k: int, M, h: float = 1e-5, dtype=np.longdouble) -> float:
    """Max relative error between central differences and ``-(a, b)``.

    Entries whose analytic derivative is below ``1e-10`` in magnitude are
    compared by absolute error instead. The loss is evaluated in ``dtype`` so that rounding stays below
    the truncation error of the difference quotient.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    n = _counts_vector(counts)
    M = as_matrix(M)
    K = M.shape[0]
    a, b = per_count_integrands(n, query_k, M)
    analytic = np.zeros((K, K))
    analytic[:, query_k] = -b
    analytic[query_k, query_k] = -a
    Mh = M.astype(dtype)
    worst = 0.0
    for i in range(K):
        for j in range(K):
            up, dn = Mh.copy(), Mh.copy()
            up[i, j] += dtype(h)
            dn[i, j] -= dtype(h)
            fd = (_loss_hp(n, query_k, up, dtype) - _loss_hp(n, query_k, dn, dtype)) / (
                up[i, j] - dn[i, j]
            )
            scale = max(abs(analytic[i, j]), 1e-10)
            err = float(abs(fd - analytic[i, j]))
            worst = max(worst, err / scale if scale > 1e-10 else err)
    return worst

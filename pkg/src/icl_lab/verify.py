"""Seeded property suites behind ``icl-lab verify``."""

from __future__ import annotations

import math

import numpy as np

from icl_lab.analysis import loss_report
from icl_lab.attention import reduce
from icl_lab.features import (
    TokenDistribution,
    build_basis,
    default_event_constant,
    event_mask,
    multinomial_tail_bound,
)
from icl_lab.gradients import finite_diff_check, full_q_gradient, population_gradient_exact
from icl_lab.trainer import TrainConfig, dual_mode_run


def check(name: str, observed: float, tolerance: float, passed: bool, **extra) -> dict:
    return {"name": name, "tolerance": tolerance, "observed": observed, "passed": bool(passed), **extra}


def random_fd_instances(n: int, rng):
    for _ in range(n):
        K = int(rng.integers(2, 7))
        N = int(rng.integers(1, 65))
        counts = rng.multinomial(N, rng.dirichlet(np.ones(K)))
        k = int(rng.integers(K))
        M = rng.uniform(-2.0, 2.0, size=(K, K))
        yield counts, k, M


def suite_gradients(seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    worst = max(finite_diff_check(c, k, M, h=1e-5) for c, k, M in random_fd_instances(100, rng))
    out = [check("finite_difference_max_rel_error", worst, 1e-6, worst <= 1e-6)]

    rep = population_gradient_exact(TokenDistribution.balanced(2), 2, np.zeros((2, 2)))
    err = max(np.abs(rep.alpha - 1 / 16).max(), abs(rep.beta[0, 1] + 1 / 16), abs(rep.beta[1, 0] + 1 / 16))
    out.append(check("exact_gradient_K2_N2", float(err), 1e-15, err <= 1e-15))

    dist = TokenDistribution([0.5, 0.3, 0.2])
    basis = build_basis(5, 3, seed, "random_orthonormal")
    worst = 0.0
    for _ in range(5):
        Q = rng.normal(size=(5, 5))
        red = reduce(-full_q_gradient(dist, 10, Q, basis), basis).M
        rep = population_gradient_exact(dist, 10, reduce(Q, basis))
        worst = max(worst, float(np.abs(red - rep.as_update()).max()))
    out.append(check("full_gradient_reduction", worst, 1e-12, worst <= 1e-12))
    return out


def sandwich_instance(rng, regime: str):
    K = int(rng.integers(2, 4))
    N = int(rng.integers(1, 31))
    if regime == "balanced":
        dist = TokenDistribution.balanced(K)
        cmax = float(np.min(dist.p * K))
    else:
        dist = TokenDistribution.imbalanced(K, float(rng.uniform(0.55, 0.8)))
        cmax = float(np.min(dist.p[1:] * K))
    # keep n_k = 0 outside the event so the lower bound can bite
    c = float(rng.uniform(0.2, 0.95)) * cmax
    M = rng.uniform(-3.0, 3.0, size=(K, K))
    return dist, N, c, M


def sandwich_slacks(dist, N, c, M) -> tuple[float, float, float]:
    """Minimum slack of the lower and upper sandwich inequalities and of Llow <= L."""
    rep = loss_report(dist, N, M, c=c)
    tail = 3.0 * math.exp(-(c**2) * N / (25.0 * dist.K**2))
    if dist.regime == "imbalanced":
        mid = rep.cL_k - rep.Loi_k
        lower = mid - rep.cLtilde_k
        upper = rep.cLtilde_k + tail - mid
    else:
        mid = rep.L_k - rep.Llow_k
        lower = mid - rep.Ltilde_k
        upper = rep.Ltilde_k + 3.0 * dist.p * math.exp(-(c**2) * N / (25.0 * dist.K**2)) - mid
    lower = min(float(lower.min()), float(rep.Ltilde_k.min()))
    return lower, float(upper.min()), rep.L - rep.Llow


def suite_bounds(seed: int = 0, instances: int = 200) -> list[dict]:
    rng = np.random.default_rng(seed)
    out = []
    for regime in ("balanced", "imbalanced"):
        lo = up = gap = math.inf
        for _ in range(instances):
            a, b, g = sandwich_slacks(*sandwich_instance(rng, regime))
            lo, up, gap = min(lo, a), min(up, b), min(gap, g)
        out.append(check(f"sandwich_lower_{regime}", lo, -1e-12, lo >= -1e-12))
        out.append(check(f"sandwich_upper_{regime}", up, -1e-12, up >= -1e-12))
        # L = Llow exactly when K = 2 and N = 1; allow rounding there
        out.append(check(f"llow_below_loss_{regime}", gap, -1e-15, gap >= -1e-15))
    return out


def event_miss_rate(dist: TokenDistribution, N: int, samples: int, rng) -> tuple[float, float]:
    c = default_event_constant(dist.K, N)
    draws = rng.multinomial(N, dist.p, size=samples)
    miss = 1.0 - event_mask(draws, dist, c).mean()
    return float(miss), multinomial_tail_bound(N, dist.K, c)


def suite_events(seed: int = 0, samples: int = 100_000) -> list[dict]:
    rng = np.random.default_rng(seed)
    out = []
    for K, N in ((3, 512), (4, 1024)):
        for dist in (TokenDistribution.balanced(K), TokenDistribution.imbalanced(K, 0.5)):
            miss, bound = event_miss_rate(dist, N, samples, rng)
            out.append(check(f"event_miss_rate_{dist.regime}_K{K}_N{N}", miss, bound, miss <= bound))
    return out


def suite_closure(seed: int = 0, steps: int = 1000) -> list[dict]:
    out = []
    for basis_mode in ("identity", "random_orthonormal"):
        cfg = TrainConfig(
            TokenDistribution.balanced(4), 32, 2.0, steps, d=4,
            estimator="exact", basis=basis_mode, seed=seed,
        )
        div = dual_mode_run(cfg).divergence
        out.append(check(f"dual_mode_divergence_{basis_mode}", div, 1e-10, div <= 1e-10))
    return out


SUITES = {
    "gradients": suite_gradients,
    "bounds": suite_bounds,
    "events": suite_events,
    "closure": suite_closure,
}


def run_suite(name: str, seed: int = 0) -> list[dict]:
    if name == "all":
        return [c for fn in SUITES.values() for c in fn(seed)]
    if name not in SUITES:
        raise KeyError(name)
    return SUITES[name](seed)

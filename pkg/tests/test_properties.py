import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from icl_lab.attention import attention_profile, embed, forward, lift, predict_from_profile
from icl_lab.features import (
    Prompt,
    PromptCounts,
    TokenDistribution,
    build_basis,
    enumerate_support,
    event_mask,
)
from icl_lab.gradients import finite_diff_check, per_count_integrands, per_count_loss

weights = st.floats(-5, 5, allow_nan=False)


@st.composite
def count_cases(draw, max_K=6, max_N=40):
    K = draw(st.integers(2, max_K))
    n = draw(arrays(np.int64, K, elements=st.integers(0, max_N)))
    if n.sum() == 0:
        n[draw(st.integers(0, K - 1))] = 1
    k = draw(st.integers(0, K - 1))
    M = draw(arrays(float, (K, K), elements=weights))
    return n, k, M


@given(count_cases())
def test_profile_is_a_distribution(case):
    n, k, M = case
    s = attention_profile(PromptCounts(n), k, M).scores
    assert np.all(s >= 0)
    assert abs(s.sum() - 1) <= 1e-12
    assert np.all(s[n == 0] == 0)


@given(count_cases())
def test_loss_and_integrand_ranges(case):
    n, k, M = case
    ell = per_count_loss(n, k, M)
    a, b = per_count_integrands(n, k, M)
    assert 0 <= ell <= 1 + 1e-12
    assert a >= 0
    assert abs(a - 2 * attention_profile(PromptCounts(n), k, M).scores[k] * ell) <= 1e-12
    assert b[k] == 0


@settings(max_examples=40, deadline=None)
@given(count_cases(max_N=64))
def test_finite_difference_property(case):
    n, k, M = case
    M = 0.4 * M  # entries in [-2, 2]
    assert finite_diff_check(n, k, M) <= 1e-6


@settings(max_examples=40, deadline=None)
@given(count_cases(max_K=4, max_N=8), st.integers(0, 2**16), st.integers(0, 3))
def test_pipeline_matches_profile(case, seed, extra_d):
    n, k, M = case
    K = n.size
    basis = build_basis(K + extra_d, K, seed=seed, mode="random_orthonormal")
    rng = np.random.default_rng(seed)
    tokens = rng.permutation(np.repeat(np.arange(K), n))
    w = rng.normal(size=basis.d)
    y = forward(embed(Prompt(tokens, k, w), basis), lift(M, basis))
    prof = attention_profile(PromptCounts(n), k, M)
    assert abs(y - predict_from_profile(prof, w, basis)) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(0, 25), st.integers(0, 2**16))
def test_enumeration_normalized(K, N, seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(K + 1))
    sup = enumerate_support(TokenDistribution(p), max(N, 1))
    assert abs(math.fsum(sup.weights) - 1) <= 1e-10
    assert np.all(sup.counts.sum(axis=1) == max(N, 1))
    assert len({tuple(r) for r in sup.counts}) == sup.size


@given(st.integers(2, 5), st.integers(5, 200), st.floats(0.05, 20))
def test_event_widens_with_c(K, N, c):
    dist = TokenDistribution.balanced(K)
    draws = np.random.default_rng(N).multinomial(N, dist.p, size=200)
    inner = event_mask(draws, dist, c)
    outer = event_mask(draws, dist, 2 * c)
    assert np.all(outer[inner])

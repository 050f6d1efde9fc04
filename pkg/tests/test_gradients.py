import itertools
import math

import numpy as np
import pytest

from icl_lab.attention import lift, reduce
from icl_lab.features import TokenDistribution, build_basis
from icl_lab.gradients import (
    finite_diff_check,
    full_q_gradient,
    per_count_integrands,
    per_count_loss,
    population_gradient_exact,
    population_gradient_mc,
)


def brute_force_loss(p, N, M):
    """Population loss by summing over every token sequence.

    The task expectation is taken analytically: with E[w w^T] = I the squared
    error of a query on v_k is |sum_i attn_i v_{x_i} - v_k|^2.
    """
    K = len(p)
    V = np.eye(K)
    total = 0.0
    for seq in itertools.product(range(K), repeat=N):
        prob = math.prod(p[s] for s in seq)
        for k in range(K):
            logits = np.array([M[s, k] for s in seq])
            attn = np.exp(logits - logits.max())
            attn /= attn.sum()
            u = attn @ V[list(seq)]
            total += prob * p[k] * 0.5 * np.sum((u - V[k]) ** 2)
    return total


def brute_force_gradient(p, N, M, h=1e-6):
    G = np.zeros_like(M)
    for i in range(M.shape[0]):
        for j in range(M.shape[1]):
            up, dn = M.copy(), M.copy()
            up[i, j] += h
            dn[i, j] -= h
            G[i, j] = (brute_force_loss(p, N, up) - brute_force_loss(p, N, dn)) / (2 * h)
    return G


def test_per_count_loss_examples():
    M = np.zeros((2, 2))
    assert per_count_loss([1, 1], 0, M) == 0.25
    assert per_count_loss([4, 0, 0], 0, np.ones((3, 3))) == 0.0
    assert per_count_loss([0, 3], 0, M) == 1.0


def test_per_count_integrand_examples():
    a, b = per_count_integrands([1, 1], 0, np.zeros((2, 2)))
    assert a == 0.25
    assert b[1] == -0.25
    a, b = per_count_integrands([5, 0, 0], 0, np.ones((3, 3)))
    assert a == 0.0 and not b.any()


def test_exact_gradient_two_tokens():
    rep = population_gradient_exact(TokenDistribution.balanced(2), 2, np.zeros((2, 2)))
    assert np.abs(rep.alpha - 1 / 16).max() <= 1e-15
    assert abs(rep.beta[0, 1] + 1 / 16) <= 1e-15
    assert abs(rep.beta[1, 0] + 1 / 16) <= 1e-15
    np.testing.assert_array_equal(np.diag(rep.beta), 0.0)


def test_single_feature_gradient_is_zero():
    rep = population_gradient_exact(TokenDistribution([1.0]), 7, np.zeros((1, 1)))
    assert rep.alpha[0] == 0.0
    basis = build_basis(3, 1)
    assert not full_q_gradient(TokenDistribution([1.0]), 4, np.zeros((3, 3)), basis).any()


@pytest.mark.parametrize("p, N", [([0.5, 0.5], 3), ([0.2, 0.3, 0.5], 3), ([0.6, 0.4], 5)])
def test_exact_gradient_matches_brute_force(p, N):
    rng = np.random.default_rng(N)
    M = rng.uniform(-1, 1, size=(len(p), len(p)))
    rep = population_gradient_exact(TokenDistribution(p), N, M)
    G = brute_force_gradient(p, N, M)
    np.testing.assert_allclose(rep.as_update(), -G, atol=1e-8)


def test_mc_gradient_within_std_err():
    dist = TokenDistribution.balanced(2)
    rep = population_gradient_mc(dist, 2, np.zeros((2, 2)), 10**6, np.random.default_rng(0))
    assert abs(rep.alpha[0] - 1 / 16) <= 4 * rep.std_err[0, 0]
    assert abs(rep.beta[0, 1] + 1 / 16) <= 4 * rep.std_err[0, 1]


def test_mc_single_sample_equals_draw():
    dist = TokenDistribution([0.2, 0.3, 0.5])
    M = np.random.default_rng(1).normal(size=(3, 3))
    rep = population_gradient_mc(dist, 6, M, 1, np.random.default_rng(4))
    # replay the same stream to recover the single draw
    base = int(np.random.default_rng(4).integers(2**63))
    seed = np.random.SeedSequence(base).spawn(1)[0]
    n = np.random.default_rng(seed).multinomial(6, dist.p, size=1)[0]
    for k in range(3):
        a, b = per_count_integrands(n, k, M)
        assert rep.alpha[k] == dist.p[k] * a
        b[k] = 0.0
        np.testing.assert_array_equal(rep.beta[k], dist.p[k] * b)


def test_mc_independent_of_workers():
    dist = TokenDistribution.balanced(3)
    M = np.random.default_rng(2).normal(size=(3, 3))
    a = population_gradient_mc(dist, 9, M, 20_000, 11, workers=1, block=4096)
    b = population_gradient_mc(dist, 9, M, 20_000, 11, workers=4, block=4096)
    assert a.alpha.tobytes() == b.alpha.tobytes()
    assert a.beta.tobytes() == b.beta.tobytes()


def test_full_gradient_zero_init_pattern():
    basis = build_basis(2, 2)
    G = full_q_gradient(TokenDistribution.balanced(2), 2, np.zeros((2, 2)), basis)
    red = reduce(-G, basis).M
    np.testing.assert_allclose(red, [[1 / 16, -1 / 16], [-1 / 16, 1 / 16]], atol=1e-15)


def test_full_gradient_reduces_to_reduced_gradient():
    rng = np.random.default_rng(3)
    dist = TokenDistribution([0.5, 0.3, 0.2])
    basis = build_basis(6, 3, seed=5, mode="random_orthonormal")
    for _ in range(3):
        Q = rng.normal(size=(6, 6))
        G = full_q_gradient(dist, 8, Q, basis)
        rep = population_gradient_exact(dist, 8, reduce(Q, basis))
        assert np.abs(reduce(-G, basis).M - rep.as_update()).max() <= 1e-12
        # the gradient lives in the feature span
        P = basis.V @ basis.V.T
        assert np.abs(G - P @ G @ P).max() <= 1e-12


def test_full_gradient_matches_ambient_finite_difference():
    """Differentiate the population loss in Q directly, off the feature span too."""
    dist = TokenDistribution([0.6, 0.4])
    basis = build_basis(3, 2, seed=1, mode="random_orthonormal")
    Q = np.random.default_rng(6).normal(size=(3, 3))
    G = full_q_gradient(dist, 3, Q, basis)

    def loss(Qx):
        # the loss only sees Q through v_n^T Q v_k
        return brute_force_loss(dist.p, 3, reduce(Qx, basis).M)

    h = 1e-6
    fd = np.zeros_like(Q)
    for i in range(3):
        for j in range(3):
            up, dn = Q.copy(), Q.copy()
            up[i, j] += h
            dn[i, j] -= h
            fd[i, j] = (loss(up) - loss(dn)) / (2 * h)
    np.testing.assert_allclose(G, fd, atol=1e-8)


def test_finite_difference_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(30):
        K = int(rng.integers(2, 7))
        N = int(rng.integers(1, 65))
        n = rng.multinomial(N, rng.dirichlet(np.ones(K)))
        M = rng.uniform(-2, 2, size=(K, K))
        assert finite_diff_check(n, int(rng.integers(K)), M) <= 1e-6


def test_finite_difference_saturated():
    M = np.zeros((3, 3))
    M[0, 0] = 60.0
    assert finite_diff_check([4, 2, 1], 0, M) <= 1e-6
    a, b = per_count_integrands([4, 2, 1], 0, M)
    assert abs(a) < 1e-20 and np.abs(b).max() < 1e-20


def test_lift_reduce_round_trip():
    basis = build_basis(5, 3, seed=2, mode="random_orthonormal")
    M = np.random.default_rng(8).normal(size=(3, 3))
    np.testing.assert_allclose(reduce(lift(M, basis), basis).M, M, atol=1e-13)

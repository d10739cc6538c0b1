import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oddm_hmim.hqc import build_hqc
from oddm_hmim.map_estimator import (
    BlockObservation,
    extrinsic_messages,
    mode_messages,
    posterior,
    soft_statistics,
    symbol_likelihoods,
)


def enumeration_marginals(x, v, c, prior=None):
    """Marginals of the joint posterior over every valid block, by brute force."""
    nb = x.size
    prior = np.full(c.q2_order, 1 / c.q2_order) if prior is None else prior
    sym = np.zeros((nb, c.q1_order, c.q2_order))
    mode = np.zeros(c.q2_order)
    for b in range(c.q2_order):
        for q1s in itertools.product(range(c.q1_order), repeat=nb):
            pts = c.points[list(q1s), b]
            w = prior[b] / c.q1_order**nb * np.exp(-np.sum(np.abs(x - pts) ** 2 / v))
            mode[b] += w
            for i, a in enumerate(q1s):
                sym[i, a, b] += w
    return sym / mode.sum(), mode / mode.sum()


def _noisy_block(rng, c, nb, scale=0.4):
    mode = rng.integers(c.q2_order)
    x = c.points[rng.integers(c.q1_order, size=nb), mode]
    return x + scale * (rng.standard_normal(nb) + 1j * rng.standard_normal(nb))


class TestObservation:
    def test_rejects_non_positive_variance(self):
        with pytest.raises(ValueError):
            BlockObservation(np.zeros(2), np.array([1.0, 0.0]), build_hqc(2, 2, 1.4))

    def test_rejects_bad_prior(self):
        c = build_hqc(2, 2, 1.4)
        with pytest.raises(ValueError):
            BlockObservation(np.zeros(2), 1.0, c, prior_mode=np.array([0.7, 0.7]))
        with pytest.raises(ValueError):
            BlockObservation(np.zeros(2), 1.0, c, prior_mode=np.ones(3) / 3)


class TestLikelihoods:
    def test_sharp_on_point(self):
        c = build_hqc(4, 4, 1.1)
        xi = symbol_likelihoods(BlockObservation(np.array([c.points[2, 1]]), 1e-6, c))
        assert xi[0, 2, 1] == pytest.approx(1.0)

    def test_flat_when_noise_huge(self):
        c = build_hqc(4, 4, 1.1)
        xi = symbol_likelihoods(BlockObservation(np.array([0.3 + 0.1j]), 1e12, c))
        assert np.allclose(xi, 1 / 16)

    def test_midpoint_symmetry(self):
        c = build_hqc(2, 2, 1.4)
        mid = (c.points[0, 0] + c.points[1, 0]) / 2
        xi = symbol_likelihoods(BlockObservation(np.array([mid]), 0.3, c))
        assert xi[0, 0, 0] == pytest.approx(xi[0, 1, 0], abs=1e-15)

    def test_underflow_safe(self):
        c = build_hqc(4, 4, 1.1)
        xi = symbol_likelihoods(BlockObservation(np.array([5.0 + 5j]), 1e-9, c))
        assert np.all(np.isfinite(xi)) and xi.sum() == pytest.approx(1.0)

    def test_mode_messages_are_column_sums(self, rng):
        xi = rng.random((3, 4, 4))
        assert np.allclose(mode_messages(xi), xi.sum(axis=1), atol=1e-15)
        one_hot = np.zeros((1, 4, 4))
        one_hot[0, 1, 3] = 1
        assert mode_messages(one_hot).tolist() == [[0, 0, 0, 1]]


class TestExtrinsic:
    def test_single_symbol_block_is_uninformed(self, rng):
        assert np.allclose(extrinsic_messages(rng.random((1, 4))), 0.25)

    def test_identical_inputs_identical_outputs(self, rng):
        u = np.tile(rng.random(4), (3, 1))
        v = extrinsic_messages(u)
        assert np.allclose(v, v[0])

    def test_matches_naive_product(self, rng):
        for _ in range(100):
            u = rng.random((3, 2))
            prior = rng.dirichlet([1, 1])
            naive = np.array([prior * np.prod(np.delete(u, i, axis=0), axis=0) for i in range(3)])
            naive /= naive.sum(axis=1, keepdims=True)
            assert np.max(np.abs(extrinsic_messages(u, prior) - naive)) < 1e-12

    def test_zero_factor(self):
        u = np.array([[0.0, 1.0], [0.5, 0.5], [0.2, 0.8]])
        v = extrinsic_messages(u)
        assert np.allclose(v[0], [0.2, 0.8])
        assert np.allclose(v[1:, 0], 0.0)


class TestPosterior:
    @pytest.mark.parametrize("q", [(2, 2), (4, 4), (4, 2), (2, 4)])
    @pytest.mark.parametrize("nb", [1, 2, 3, 4])
    def test_matches_enumeration(self, q, nb, rng):
        c = build_hqc(*q, 1.3)
        for _ in range(30):
            x = _noisy_block(rng, c, nb)
            v = rng.uniform(0.05, 1.0, nb)
            post = posterior(BlockObservation(x, v, c))
            sym, mode = enumeration_marginals(x, v, c)
            assert np.max(np.abs(post.symbol_pmfs - sym)) < 1e-10
            assert np.max(np.abs(post.mode_pmf - mode)) < 1e-10

    def test_matches_enumeration_with_prior(self, rng):
        c = build_hqc(4, 4, 1.1)
        prior = rng.dirichlet(np.ones(4))
        x = _noisy_block(rng, c, 3)
        post = posterior(BlockObservation(x, 0.2, c, prior_mode=prior))
        sym, mode = enumeration_marginals(x, np.full(3, 0.2), c, prior)
        assert np.max(np.abs(post.symbol_pmfs - sym)) < 1e-10
        assert np.max(np.abs(post.mode_pmf - mode)) < 1e-10

    def test_noiseless_block_pins_mode(self):
        c = build_hqc(4, 4, 2.0)
        x = c.points[[0, 3, 1, 2], 2]
        post = posterior(BlockObservation(x, 1e-4, c))
        assert post.mode_pmf.argmax() == 2 and post.mode_pmf[2] == pytest.approx(1.0)

    def test_batched_equals_looped(self, rng):
        c = build_hqc(2, 2, 1.4)
        xs = np.stack([_noisy_block(rng, c, 2) for _ in range(5)])
        batch = posterior(BlockObservation(xs, 0.3, c))
        for i in range(5):
            one = posterior(BlockObservation(xs[i], 0.3, c))
            assert np.allclose(batch.symbol_pmfs[i], one.symbol_pmfs, atol=1e-15)

    def test_likelihood_count(self):
        for q1, q2, nb in [(2, 2, 1), (4, 4, 4), (4, 2, 3), (16, 4, 2)]:
            c = build_hqc(q1, q2, 1.2)
            counter = Counter()
            posterior(BlockObservation(np.zeros(nb), 1.0, c), counter)
            assert counter["likelihood"] == nb * q1 * q2

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31), nb=st.integers(2, 4))
    def test_permutation_equivariance(self, seed, nb):
        rng = np.random.default_rng(seed)
        c = build_hqc(4, 4, 1.1)
        x = _noisy_block(rng, c, nb)
        v = rng.uniform(0.1, 1.0, nb)
        perm = rng.permutation(nb)
        a = posterior(BlockObservation(x, v, c))
        b = posterior(BlockObservation(x[perm], v[perm], c))
        assert np.allclose(b.symbol_pmfs, a.symbol_pmfs[perm], atol=1e-12)
        assert np.allclose(b.mode_pmf, a.mode_pmf, atol=1e-12)
        assert np.allclose(a.symbol_pmfs.sum(axis=(-2, -1)), 1.0, atol=1e-12)
        assert np.all(a.symbol_pmfs >= 0)


class TestSoftStatistics:
    def test_one_hot(self):
        c = build_hqc(4, 4, 1.1)
        post = posterior(BlockObservation(np.array([c.points[1, 3]]), 1e-8, c))
        mean, var = soft_statistics(post, c)
        assert mean[0] == pytest.approx(c.points[1, 3])
        assert var[0] == pytest.approx(0.0, abs=1e-12)

    def test_uniform(self):
        c = build_hqc(4, 4, 1.1)
        post = posterior(BlockObservation(np.array([0.0j]), 1e15, c))
        mean, var = soft_statistics(post, c)
        assert abs(mean[0]) < 1e-12 and var[0] == pytest.approx(1.0, abs=1e-9)

    def test_weighted_sum_oracle(self, rng):
        c = build_hqc(2, 2, 1.4)
        post = posterior(BlockObservation(_noisy_block(rng, c, 2), 0.5, c))
        mean, var = soft_statistics(post, c)
        for i in range(2):
            p = post.symbol_pmfs[i].ravel()
            pts = c.points.ravel()
            m = sum(pi * xi for pi, xi in zip(p, pts))
            assert mean[i] == pytest.approx(m, abs=1e-13)
            assert var[i] == pytest.approx(sum(pi * abs(xi - m) ** 2 for pi, xi in zip(p, pts)), abs=1e-13)
            assert 0 <= var[i] <= np.max(np.abs(pts) ** 2)

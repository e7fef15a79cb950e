import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import crf_energy_pairs, flood_fill_count
from wnetseg.crf import CrfParams, CrfSizeError, crf_argmax, crf_energy, mean_field
from wnetseg.synth import two_region
from wnetseg.tensor import ShapeError, make_rng, one_hot

NO_PAIRWISE = CrfParams(w_app=0.0, w_smooth=0.0)


def random_soft(rng, h, w, k, scale=1.0):
    z = rng.normal(0, scale, (h, w, k))
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def noisy_two_region(seed=0, size=32, k=2):
    """A two-region image with a unary field that is right on average but speckled."""
    rng = make_rng(seed)
    img, labels, _ = two_region(size, noise=0.05, rng=rng)
    logits = 1.0 * one_hot(labels, k) + rng.normal(0, 1.0, (size, size, k))
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return img, e / e.sum(axis=-1, keepdims=True)


class TestEnergy:
    def test_unary_only(self):
        rng = make_rng(0)
        p = random_soft(rng, 4, 5, 3)
        labels = rng.integers(0, 3, (4, 5))
        expect = -sum(math.log(p[y, x, labels[y, x]]) for y in range(4) for x in range(5))
        assert crf_energy(labels, rng.random((4, 5, 3)), p, NO_PAIRWISE) == pytest.approx(expect, rel=1e-14)

    def test_uniform_field(self):
        labels = make_rng(1).integers(0, 4, (3, 6))
        e = crf_energy(labels, np.zeros((3, 6, 1)), np.full((3, 6, 4), 0.25), NO_PAIRWISE)
        assert e == pytest.approx(18 * math.log(4), rel=1e-14)

    def test_three_by_three_matches_pair_sum(self):
        rng = make_rng(2)
        p = random_soft(rng, 3, 3, 3)
        img = rng.random((3, 3, 3))
        labels = rng.integers(0, 3, (3, 3))
        params = CrfParams(theta_alpha=2.0, theta_beta=60.0, theta_gamma=1.5)
        expect, pairs = crf_energy_pairs(labels, img, p, 5.0, 3.0, 2.0, 60.0, 1.5)
        assert pairs == 36
        assert crf_energy(labels, img, p, params) == pytest.approx(expect, rel=1e-12)

    def test_zero_probability_is_infinite(self):
        p = np.zeros((1, 2, 2))
        p[..., 0] = 1.0
        assert crf_energy(np.array([[0, 1]]), np.zeros((1, 2, 1)), p) == math.inf

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            crf_energy(np.zeros((2, 2), int), np.zeros((3, 2, 1)), np.full((3, 2, 2), 0.5))


class TestMeanField:
    def test_zero_pairwise_is_identity(self):
        p = random_soft(make_rng(3), 6, 7, 4)
        for it in (0, 1, 10):
            q = mean_field(p, np.zeros((6, 7, 3)), CrfParams(iterations=it, w_app=0.0, w_smooth=0.0))
            assert q.tobytes() == p.tobytes()

    def test_uniform_on_constant_image_is_fixed(self):
        q = mean_field(np.full((5, 5, 3), 1 / 3), np.full((5, 5, 3), 0.4))
        np.testing.assert_allclose(q, 1 / 3, atol=1e-15)

    def test_stays_on_simplex_every_iteration(self):
        img, p = noisy_two_region(1, size=16, k=3)
        seen = []

        def check(i, q):
            seen.append(i)
            assert q.min() >= 0
            assert np.abs(q.sum(axis=-1) - 1).max() <= 1e-6

        mean_field(p, img, on_iteration=check)
        assert seen == list(range(10))

    def test_tiny_probabilities_stay_finite(self):
        p = np.full((4, 4, 2), 1e-300)
        p[..., 0] = 1.0
        q = mean_field(p, np.zeros((4, 4, 1)))
        assert np.all(np.isfinite(q))

    def test_removes_speckle(self):
        img, p = noisy_two_region(0)
        before = flood_fill_count(crf_argmax(p))
        after = flood_fill_count(crf_argmax(mean_field(p, img)))
        assert after < before

    def test_does_not_lower_energy_of_initial_argmax(self):
        img, p = noisy_two_region(4, size=12)
        params = CrfParams()
        start = crf_energy(crf_argmax(p), img, p, params)
        end = crf_energy(crf_argmax(mean_field(p, img, params)), img, p, params)
        assert end < start

    def test_size_ceiling(self):
        with pytest.raises(CrfSizeError, match="downscale"):
            mean_field(np.full((129, 128, 2), 0.5), np.zeros((129, 128, 1)))

    def test_deterministic(self):
        img, p = noisy_two_region(2, size=16)
        assert mean_field(p, img).tobytes() == mean_field(p, img).tobytes()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 6), st.integers(1, 4))
    def test_output_is_probability_field(self, seed, h, w, k):
        rng = make_rng(seed)
        q = mean_field(random_soft(rng, h, w, k, scale=5.0), rng.random((h, w, 3)), CrfParams(iterations=3))
        assert q.min() >= 0
        np.testing.assert_allclose(q.sum(axis=-1), 1.0, atol=1e-12)


class TestArgmax:
    def test_one_hot(self):
        labels = make_rng(5).integers(0, 4, (3, 4))
        np.testing.assert_array_equal(crf_argmax(one_hot(labels, 4)), labels)

    def test_tie_goes_to_class_zero(self):
        assert crf_argmax(np.full((1, 1, 2), 0.5))[0, 0] == 0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_idempotent(self, seed):
        q = random_soft(make_rng(seed), 4, 4, 3)
        a = crf_argmax(q)
        np.testing.assert_array_equal(crf_argmax(one_hot(a, 3)), a)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dense_affinity, hard_ncut_sets, soft_ncut_quadruple
from wnetseg.affinity import (
    AffinityParams,
    ParameterError,
    build_affinity,
    degree_vector,
    dump_triples,
    neighborhood_offsets,
)
from wnetseg.ncut import DegenerateClassError, hard_ncut, soft_ncut, soft_ncut_grad, soft_ncut_with_grad
from wnetseg.model.layers import softmax_backward
from wnetseg.tensor import make_rng, one_hot


def random_soft(rng, h, w, k):
    z = rng.standard_normal((h, w, k))
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def random_image(rng, h, w, c=3, levels=None):
    img = rng.random((h, w, c))
    if levels:
        img = np.round(img * (levels - 1)) / (levels - 1)
    return img


class TestAffinity:
    def test_self_weight_is_one(self):
        W = build_affinity(random_image(make_rng(0), 4, 4))
        np.testing.assert_array_equal(W.matrix.diagonal(), 1.0)

    def test_distance_five_is_absent(self):
        W = build_affinity(np.zeros((1, 8, 1)))
        cols, _ = W.neighbors(0)
        assert cols.tolist() == [0, 1, 2, 3, 4]
        assert (5, 0) not in neighborhood_offsets(5.0)
        assert (4, 0) in neighborhood_offsets(5.0)

    def test_identical_horizontal_neighbour(self):
        W = build_affinity(np.full((1, 2, 3), 0.4))
        assert W.matrix[0, 1] == pytest.approx(math.exp(-1 / 16), abs=0)
        assert W.matrix[0, 1] == pytest.approx(0.939413, abs=1e-6)

    def test_single_pixel_degree(self):
        np.testing.assert_array_equal(degree_vector(build_affinity(np.zeros((1, 1, 3)))), [1.0])

    def test_two_pixel_degree(self):
        d = degree_vector(build_affinity(np.zeros((1, 2, 1))))
        np.testing.assert_allclose(d, 1 + math.exp(-1 / 16), rtol=0, atol=1e-15)

    def test_degree_is_dense_row_sum(self):
        W = build_affinity(random_image(make_rng(1), 6, 6))
        np.testing.assert_allclose(W.degree, W.dense().sum(axis=1), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("shape", [(3, 5, 3), (6, 6, 1), (7, 4, 3)])
    def test_matches_dense_oracle(self, shape):
        img = random_image(make_rng(sum(shape)), *shape)
        np.testing.assert_allclose(build_affinity(img).dense(), dense_affinity(img), rtol=0, atol=1e-12)

    def test_nondefault_parameters_match_oracle(self):
        img = random_image(make_rng(5), 5, 5, 1)
        params = AffinityParams(sigma_i=30.0, sigma_x=2.0, radius=2.5)
        np.testing.assert_allclose(build_affinity(img, params).dense(),
                                   dense_affinity(img, 30.0, 2.0, 2.5), rtol=0, atol=1e-12)

    def test_symmetric(self):
        W = build_affinity(random_image(make_rng(2), 9, 7)).dense()
        np.testing.assert_array_equal(W, W.T)

    def test_weight_decreases_with_colour_distance(self):
        img = np.zeros((1, 6, 1))
        img[0, :, 0] = [0.0, 0.0, 0.02, 0.05, 0.1, 0.3]
        W = build_affinity(img).dense()
        # equal spatial distance 1, growing colour difference
        row = [W[0, 1], W[1, 2], W[3, 4]]
        assert row[0] > row[1] > row[2]

    def test_weight_decreases_with_distance(self):
        W = build_affinity(np.zeros((1, 5, 1))).dense()
        assert np.all(np.diff(W[0]) < 0)

    @pytest.mark.parametrize("kwargs", [dict(sigma_i=0.0), dict(sigma_x=-1.0), dict(radius=0.0)])
    def test_nonpositive_parameters_rejected(self, kwargs):
        with pytest.raises(ParameterError):
            AffinityParams(**kwargs)

    def test_triples_are_sorted(self, tmp_path):
        W = build_affinity(np.zeros((2, 2, 1)))
        dump_triples(W, tmp_path / "w.txt")
        lines = (tmp_path / "w.txt").read_text().splitlines()
        keys = [tuple(map(int, ln.split()[:2])) for ln in lines]
        assert keys == sorted(keys) and len(keys) == 16


class TestHardNcut:
    def test_separated_clusters(self):
        img = np.zeros((6, 6, 1))
        img[:, 3:] = 1.0
        W = build_affinity(img, AffinityParams(sigma_i=1.0))
        labels = (img[:, :, 0] > 0).astype(int)
        assert hard_ncut(labels, W, 2) == pytest.approx(0.0, abs=1e-300)

    def test_single_class(self):
        W = build_affinity(random_image(make_rng(0), 4, 4))
        assert hard_ncut(np.zeros((4, 4), int), W, 1) == 0.0

    def test_matches_set_oracle(self):
        rng = make_rng(11)
        img = random_image(rng, 5, 5)
        W = build_affinity(img)
        labels = rng.integers(0, 3, size=(5, 5))
        assert hard_ncut(labels, W, 3) == pytest.approx(hard_ncut_sets(labels, W.dense(), 3), abs=1e-10)

    def test_label_out_of_range(self):
        W = build_affinity(np.zeros((2, 2, 1)))
        with pytest.raises(ValueError):
            hard_ncut(np.array([[0, 1], [2, 0]]), W, 2)


class TestSoftNcut:
    def test_matches_quadruple_sum(self):
        rng = make_rng(4)
        for _ in range(5):
            h, w, k = rng.integers(1, 7), rng.integers(1, 7), rng.integers(1, 5)
            img = random_image(rng, h, w, levels=4)
            W = build_affinity(img)
            p = random_soft(rng, h, w, k)
            assert soft_ncut(p, W) == pytest.approx(soft_ncut_quadruple(p, W.dense()), abs=1e-9)

    def test_uniform_gives_k_minus_one(self):
        W = build_affinity(random_image(make_rng(3), 5, 5))
        for k in (1, 2, 5):
            assert soft_ncut(np.full((5, 5, k), 1.0 / k), W) == pytest.approx(k - 1, abs=1e-12)

    def test_single_class_is_zero(self):
        W = build_affinity(random_image(make_rng(3), 5, 5))
        assert soft_ncut(np.ones((5, 5, 1)), W) == 0.0

    def test_single_class_gradient_vanishes_through_softmax(self):
        # the raw gradient is not zero off the simplex; the loss is constant on it
        W = build_affinity(random_image(make_rng(3), 5, 5))
        p = np.ones((5, 5, 1))
        np.testing.assert_array_equal(softmax_backward(p, soft_ncut_grad(p, W)), 0.0)

    def test_gradient_central_differences(self):
        rng = make_rng(8)
        img = random_image(rng, 6, 6)
        W = build_affinity(img)
        p = random_soft(rng, 6, 6, 3)
        g = soft_ncut_grad(p, W)
        h = 1e-6
        for idx in [(0, 0, 0), (2, 3, 1), (5, 5, 2), (3, 1, 0)]:
            q = p.copy()
            q[idx] += h
            up = soft_ncut(q, W)
            q[idx] -= 2 * h
            down = soft_ncut(q, W)
            fd = (up - down) / (2 * h)
            assert abs(fd - g[idx]) <= 1e-6 * max(1.0, abs(g[idx]))

    def test_fused_route_agrees(self):
        rng = make_rng(9)
        W = build_affinity(random_image(rng, 5, 4))
        p = random_soft(rng, 5, 4, 4)
        loss, grad = soft_ncut_with_grad(p, W)
        assert loss == soft_ncut(p, W)
        np.testing.assert_array_equal(grad, soft_ncut_grad(p, W))

    def test_near_one_hot_matches_hard(self):
        rng = make_rng(12)
        for _ in range(5):
            img = random_image(rng, 5, 5)
            W = build_affinity(img)
            labels = rng.integers(0, 3, size=(5, 5))
            soft = soft_ncut(one_hot(labels, 3, eps=1e-9), W)
            assert soft == pytest.approx(hard_ncut(labels, W, 3), abs=1e-6)

    def test_empty_class_is_degenerate(self):
        W = build_affinity(np.zeros((2, 2, 1)))
        p = np.zeros((2, 2, 2))
        p[..., 0] = 1.0
        with pytest.raises(DegenerateClassError):
            soft_ncut(p, W)

    def test_pixel_count_mismatch(self):
        W = build_affinity(np.zeros((2, 2, 1)))
        with pytest.raises(ValueError):
            soft_ncut(np.full((3, 2, 2), 0.5), W)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 6), st.integers(1, 5))
    def test_bounds(self, seed, h, w, k):
        rng = make_rng(seed)
        W = build_affinity(random_image(rng, h, w))
        j = soft_ncut(random_soft(rng, h, w, k), W)
        assert -1e-12 <= j <= k

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 5))
    def test_class_permutation_invariance(self, seed, k):
        rng = make_rng(seed)
        W = build_affinity(random_image(rng, 4, 5))
        p = random_soft(rng, 4, 5, k)
        perm = rng.permutation(k)
        assert soft_ncut(p[..., perm], W) == pytest.approx(soft_ncut(p, W), abs=1e-12)
        np.testing.assert_allclose(soft_ncut_grad(p[..., perm], W), soft_ncut_grad(p, W)[..., perm],
                                   rtol=0, atol=1e-12)

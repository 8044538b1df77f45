import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepbdc import kernel
from deepbdc.errors import InvalidInputError, ShapeError

FIXTURES = json.loads((Path(__file__).parent / "fixtures" / "fixtures.json").read_text())


def naive_sq_dist(x):
    m = x.shape[0]
    out = np.zeros((m, m))
    for k in range(m):
        for l in range(m):
            out[k, l] = sum((x[k, i] - x[l, i]) ** 2 for i in range(x.shape[1]))
    return out


def projector(m):
    return np.eye(m) - np.ones((m, m)) / m


def random_orthonormal(p, rng):
    q, r = np.linalg.qr(rng.normal(size=(p, p)))
    return q * np.sign(np.diag(r))


# -- pairwise_sq_dist ------------------------------------------------------


def test_sq_dist_pythagorean_pair():
    np.testing.assert_array_equal(kernel.pairwise_sq_dist([[0, 0], [3, 4]]), [[0, 25], [25, 0]])


def test_sq_dist_single_observation():
    np.testing.assert_array_equal(kernel.pairwise_sq_dist([[7.0]]), [[0.0]])


def test_sq_dist_matches_double_loop():
    x = np.random.default_rng(5).normal(size=(5, 3))
    np.testing.assert_allclose(kernel.pairwise_sq_dist(x), naive_sq_dist(x), rtol=0, atol=1e-12)


def test_sq_dist_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        kernel.pairwise_sq_dist([[0.0, np.nan], [1.0, 2.0]])
    with pytest.raises(InvalidInputError):
        kernel.pairwise_sq_dist([[np.inf]])


def test_sq_dist_invariants():
    x = np.random.default_rng(1).normal(size=(9, 4)) * 1e3
    sq = kernel.pairwise_sq_dist(x)
    assert np.array_equal(sq, sq.T)
    assert np.all(np.diag(sq) == 0.0)
    assert np.all(sq >= 0)


# -- sqrt_dist -------------------------------------------------------------


def test_sqrt_dist_examples():
    np.testing.assert_array_equal(kernel.sqrt_dist(np.array([[0.0, 25.0], [25.0, 0.0]])), [[0, 5], [5, 0]])
    np.testing.assert_array_equal(kernel.sqrt_dist(np.zeros((3, 3))), np.zeros((3, 3)))


def test_sqrt_dist_round_trip():
    x = np.random.default_rng(2).normal(size=(7, 3))
    sq = kernel.pairwise_sq_dist(x)
    d = kernel.sqrt_dist(sq)
    np.testing.assert_allclose(d**2, sq, rtol=0, atol=1e-12)
    assert np.all(np.diag(d) == 0.0)


def test_distance_triangle_inequality():
    rng = np.random.default_rng(3)
    d = kernel.sqrt_dist(kernel.pairwise_sq_dist(rng.normal(size=(12, 5))))
    for _ in range(200):
        i, j, k = rng.integers(0, 12, 3)
        assert d[i, k] <= d[i, j] + d[j, k] + 1e-9


# -- double_center ---------------------------------------------------------


def test_double_center_hand_example():
    np.testing.assert_allclose(kernel.double_center(np.array([[0.0, 2.0], [2.0, 0.0]])), [[-1, 1], [1, -1]])


def test_double_center_constant_offdiagonal():
    c = 2.5
    d = c * (np.ones((3, 3)) - np.eye(3))
    p = projector(3)
    out = kernel.double_center(d)
    np.testing.assert_allclose(out, p @ d @ p, atol=1e-12)
    np.testing.assert_allclose(out.sum(axis=1), 0.0, atol=1e-12)


def test_double_center_zero():
    np.testing.assert_array_equal(kernel.double_center(np.zeros((4, 4))), np.zeros((4, 4)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_bdc_matrix_is_symmetric_with_zero_margins(m, p, seed):
    x = np.random.default_rng(seed).normal(size=(m, p))
    a = kernel.bdc_matrix(x)
    np.testing.assert_allclose(a, a.T, atol=1e-10)
    np.testing.assert_allclose(a.sum(axis=0), 0.0, atol=1e-8 * m)
    np.testing.assert_allclose(a.sum(axis=1), 0.0, atol=1e-8 * m)


# -- bdc_value / vectorize -------------------------------------------------


def test_bdc_value_hand_example():
    a = np.array([[-1.0, 1.0], [1.0, -1.0]])
    b = np.array([[-1.5, 1.5], [1.5, -1.5]])
    assert kernel.bdc_value(a, b) == 6.0


def test_bdc_value_self_is_frobenius():
    a = kernel.bdc_matrix(np.random.default_rng(0).normal(size=(6, 2)))
    assert kernel.bdc_value(a, a) == pytest.approx(np.sum(a**2))
    assert kernel.bdc_value(a, a) >= 0


def test_bdc_value_shape_mismatch():
    with pytest.raises(ShapeError):
        kernel.bdc_value(np.zeros((2, 2)), np.zeros((3, 3)))


def test_vectorize_hand_example():
    v = kernel.vectorize(np.array([[-1.0, 1.0], [1.0, -1.0]]))
    np.testing.assert_allclose(v, [-1.0, np.sqrt(2.0), -1.0])
    assert v @ v == pytest.approx(4.0)


def test_vectorize_zero_and_raw():
    assert np.all(kernel.vectorize(np.zeros((3, 3))) == 0)
    a = np.arange(9.0).reshape(3, 3)
    a = a + a.T
    np.testing.assert_array_equal(kernel.vectorize(a, scaled=False), a[np.triu_indices(3)])


def test_vectorize_inner_product_identity_6x6():
    rng = np.random.default_rng(6)
    a = kernel.bdc_matrix(rng.normal(size=(6, 3)))
    b = kernel.bdc_matrix(rng.normal(size=(6, 2)))
    assert abs(kernel.vectorize(a) @ kernel.vectorize(b) - np.trace(a.T @ b)) < 1e-12


def test_unvectorize_round_trip():
    a = kernel.bdc_matrix(np.random.default_rng(7).normal(size=(5, 3)))
    np.testing.assert_allclose(kernel.unvectorize(kernel.vectorize(a)), a, atol=1e-15)
    np.testing.assert_allclose(kernel.unvectorize(kernel.vectorize(a, False), False), a, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 24), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_trace_and_vector_forms_agree(m, p, q, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(m, p))
    y = x[:, :1] ** 2 + rng.normal(size=(m, q))
    a, b = kernel.bdc_matrix(x), kernel.bdc_matrix(y)
    t = kernel.bdc_value(a, b)
    assert abs(t - kernel.vectorize(a) @ kernel.vectorize(b)) <= 1e-10 * abs(t) + 1e-12
    # V-statistic is nonnegative
    assert t >= -1e-8 * np.linalg.norm(a) * np.linalg.norm(b)


# -- invariances -----------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 15), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_translation_and_rotation_invariance(m, p, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(m, p))
    r = random_orthonormal(p, rng)
    c = rng.normal(size=p) * 10
    np.testing.assert_allclose(kernel.bdc_matrix(x @ r.T + c), kernel.bdc_matrix(x), atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 15), st.integers(1, 6), st.floats(-50, 50).filter(lambda s: abs(s) > 1e-3),
       st.integers(0, 2**32 - 1))
def test_scaling_equivariance(m, p, s, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(m, p))
    y = rng.normal(size=(m, 2))
    np.testing.assert_allclose(kernel.bdc_matrix(s * x), abs(s) * kernel.bdc_matrix(x), atol=1e-8 * max(1, abs(s)))
    assert kernel.bdcorr(s * x, y) == pytest.approx(kernel.bdcorr(x, y), abs=1e-8)


def test_permutation_equivariance():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(10, 3))
    y = np.sin(x[:, :2]) + 0.1 * rng.normal(size=(10, 2))
    perm = rng.permutation(10)
    a = kernel.bdc_matrix(x)
    np.testing.assert_allclose(kernel.bdc_matrix(x[perm]), a[np.ix_(perm, perm)], atol=1e-12)
    v = kernel.bdc_value(a, kernel.bdc_matrix(y))
    vp = kernel.bdc_value(kernel.bdc_matrix(x[perm]), kernel.bdc_matrix(y[perm]))
    assert vp == pytest.approx(v, rel=1e-12)


# -- correlations ----------------------------------------------------------


def test_bdcorr_identity():
    x = np.random.default_rng(8).normal(size=(50, 3))
    assert abs(kernel.bdcorr(x, x) - 1.0) < 1e-10


def test_bdcorr_independent_normals_fixture():
    fx = FIXTURES["independent_normals"]
    rng = np.random.default_rng(fx["seed"])
    x = rng.normal(size=(fx["m"], 1))
    y = rng.normal(size=(fx["m"], 1))
    r = kernel.bdcorr(x, y)
    assert r == pytest.approx(fx["bdcorr"], abs=1e-12)
    assert r < 0.05


def test_bdcorr_constant_sample_is_zero():
    y = np.random.default_rng(9).normal(size=(20, 2))
    assert kernel.bdcorr(np.ones((20, 1)), y) == 0.0


def test_bdcorr_errors():
    with pytest.raises(ShapeError):
        kernel.bdcorr(np.zeros((3, 1)), np.zeros((4, 1)))
    with pytest.raises(InvalidInputError):
        kernel.bdcorr([[1.0]], [[2.0]])


def test_pearson_examples():
    x = np.random.default_rng(10).normal(size=40)
    assert kernel.pearson_corr(x, 2 * x + 1) == pytest.approx(1.0)
    assert kernel.pearson_corr(x, -x) == pytest.approx(-1.0)
    assert kernel.pearson_corr(np.ones(5), x[:5]) == 0.0
    with pytest.raises(ShapeError):
        kernel.pearson_corr(np.zeros((4, 2)), np.zeros(4))


def test_pearson_circle_is_uncorrelated():
    rng = np.random.default_rng(1000)
    theta = rng.uniform(0, 2 * np.pi, 1000)
    assert abs(kernel.pearson_corr(np.cos(theta), np.sin(theta))) < 0.05


def test_float32_mode_close_to_float64():
    x = np.random.default_rng(12).normal(size=(30, 4))
    np.testing.assert_allclose(kernel.bdc_matrix(x, dtype=np.float32), kernel.bdc_matrix(x), atol=1e-4)

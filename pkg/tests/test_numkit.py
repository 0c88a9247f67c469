import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reidmetric.errors import DegenerateNorm, ShapeMismatch
from reidmetric.numkit import (
    as_matrix,
    cosine_distance,
    finite_diff_grad,
    log_softmax,
    make_rng,
    pairwise_cosine_distance,
    relative_error,
    softmax,
    spawn_rngs,
    l2_normalize,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, st.integers(2, 16), elements=finite).filter(lambda v: np.linalg.norm(v) > 1e-3)


def test_l2_normalize_examples():
    np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-15)
    np.testing.assert_array_equal(l2_normalize([0.0, 0.0, 5.0]), [0.0, 0.0, 1.0])


def test_l2_normalize_random_256():
    v = make_rng(0).standard_normal(256)
    assert abs(np.linalg.norm(l2_normalize(v)) - 1.0) <= 1e-12


def test_l2_normalize_rows_and_degenerate():
    m = make_rng(1).standard_normal((5, 7))
    np.testing.assert_allclose(np.linalg.norm(l2_normalize(m), axis=1), 1.0, atol=1e-12)
    with pytest.raises(DegenerateNorm):
        l2_normalize(np.zeros(3))
    with pytest.raises(DegenerateNorm):
        l2_normalize([1e-13, 0.0])


@given(vectors)
def test_l2_normalize_idempotent(v):
    u = l2_normalize(v)
    np.testing.assert_allclose(l2_normalize(u), u, atol=1e-12)


def test_softmax_examples():
    np.testing.assert_array_equal(softmax([0.0, 0.0]), [0.5, 0.5])
    np.testing.assert_array_equal(softmax([1000.0, 1000.0]), [0.5, 0.5])
    np.testing.assert_allclose(softmax([1.0, 2.0, 3.0]), [0.09003, 0.24473, 0.66524], atol=1e-5)


@given(arrays(np.float64, st.integers(1, 12), elements=finite), st.floats(-1e3, 1e3))
def test_softmax_sums_to_one_and_shift_invariant(z, c):
    p = softmax(z)
    assert abs(p.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(softmax(z + c), p, atol=1e-12)


def test_log_softmax_matches_log_of_softmax():
    z = make_rng(2).standard_normal((4, 6)) * 5
    np.testing.assert_allclose(log_softmax(z), np.log(softmax(z)), atol=1e-12)


def test_cosine_distance_examples():
    u = np.array([1.0, 2.0, -0.5])
    assert cosine_distance(u, u) == pytest.approx(0.0, abs=1e-15)
    assert cosine_distance([1.0, 0.0], [0.0, 3.0]) == 1.0
    assert cosine_distance(u, -u) == pytest.approx(2.0, abs=1e-15)
    with pytest.raises(DegenerateNorm):
        cosine_distance([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ShapeMismatch):
        cosine_distance([1.0, 0.0], [1.0, 0.0, 0.0])


@settings(max_examples=50)
@given(st.integers(2, 10).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=finite), arrays(np.float64, n, elements=finite))),
    st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_cosine_distance_symmetric_scale_invariant(uv, a, b):
    u, v = uv
    if np.linalg.norm(u) < 1e-3 or np.linalg.norm(v) < 1e-3:
        return
    d = cosine_distance(u, v)
    assert 0.0 <= d <= 2.0
    assert cosine_distance(v, u) == pytest.approx(d, abs=1e-12)
    assert cosine_distance(a * u, b * v) == pytest.approx(d, abs=1e-12)


def test_pairwise_cosine_distance_matches_scalar():
    rng = make_rng(3)
    a, b = rng.standard_normal((3, 5)), rng.standard_normal((4, 5))
    D = pairwise_cosine_distance(a, b)
    for i in range(3):
        for j in range(4):
            assert D[i, j] == pytest.approx(cosine_distance(a[i], b[j]), abs=1e-12)


def test_finite_diff_examples():
    g = finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), 1e-5)
    assert g[0] == pytest.approx(6.0, abs=1e-8)
    np.testing.assert_array_equal(finite_diff_grad(lambda x: 7.0, np.ones((2, 3))), np.zeros((2, 3)))


def test_finite_diff_does_not_modify_input():
    x = np.array([1.0, -2.0, 0.5])
    before = x.copy()
    finite_diff_grad(lambda v: float(np.sum(v ** 3)), x)
    np.testing.assert_array_equal(x, before)


def test_relative_error():
    assert relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert relative_error([0.0], [0.0]) == 0.0
    assert relative_error([1.0], [-1.0]) == pytest.approx(1.0)


def test_rng_reproducible_and_streams_independent():
    a = make_rng(42).standard_normal(100)
    b = make_rng(42).standard_normal(100)
    np.testing.assert_array_equal(a, b)
    # PCG64 is specified bit-for-bit; this value is fixed across platforms
    assert make_rng(0).integers(0, 2 ** 32) == 3653403231
    x1, y1 = spawn_rngs(7, 2)
    x2, y2 = spawn_rngs(7, 2)
    np.testing.assert_array_equal(x1.random(10), x2.random(10))
    assert not np.array_equal(y1.random(10), x1.random(10))
    s0, = spawn_rngs(7, 1, stream=0)
    s1, = spawn_rngs(7, 1, stream=1)
    assert not np.array_equal(s0.random(10), s1.random(10))


def test_as_matrix():
    m = as_matrix([[1, 2], [3, 4]], rows=2, cols=2)
    assert m.dtype == np.float64 and m.flags.c_contiguous
    with pytest.raises(ShapeMismatch):
        as_matrix([1.0, 2.0])
    with pytest.raises(ShapeMismatch):
        as_matrix([[1.0, 2.0]], cols=3)
    with pytest.raises(ValueError):
        as_matrix([[np.nan]])

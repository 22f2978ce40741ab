import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctxmix.numerics import (
    Distance,
    DistanceKind,
    ShapeError,
    distance,
    layer_norm,
    make_rng,
    matmul,
    normalize_rows,
    rankdata,
    softmax,
    spearman_rho,
)

from oracles import spearman_list

COS = DistanceKind(Distance.COSINE)
EUC = DistanceKind(Distance.EUCLIDEAN)
SPR = DistanceKind(Distance.SPEARMAN)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_matmul_identity_and_zeros():
    A = make_rng(0).normal(size=(3, 4))
    assert np.array_equal(matmul(np.eye(3), A), A)
    assert np.array_equal(matmul(A, np.zeros((4, 2))), np.zeros((3, 2)))


def test_matmul_triple_loop():
    rng = make_rng(1)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    expected = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(5):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(matmul(a, b), expected, rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_softmax_values():
    np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5])
    np.testing.assert_allclose(softmax([1.0, 2.0, 3.0]), [0.09003, 0.24473, 0.66524], atol=5e-6)


def test_softmax_empty():
    with pytest.raises(ValueError):
        softmax([])


@given(arrays(np.float64, st.integers(1, 64), elements=finite), finite)
def test_softmax_probability_and_shift(x, c):
    p = softmax(x)
    assert np.all(p > 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(softmax(x + c), p, rtol=1e-9, atol=1e-15)


def test_layer_norm_trivial():
    np.testing.assert_allclose(layer_norm([2.0, 2.0], np.ones(2), np.zeros(2)), [0.0, 0.0])
    np.testing.assert_allclose(layer_norm([1.0, -1.0], np.ones(2), np.zeros(2), eps=1e-15), [1.0, -1.0], atol=1e-12)


def test_layer_norm_two_pass():
    rng = make_rng(2)
    x, g, b = rng.normal(size=8), rng.normal(size=8), rng.normal(size=8)
    mean = sum(x) / 8
    var = sum((xi - mean) ** 2 for xi in x) / 8
    expected = [(x[k] - mean) / math.sqrt(var + 1e-5) * g[k] + b[k] for k in range(8)]
    np.testing.assert_allclose(layer_norm(x, g, b, 1e-5), expected, rtol=0, atol=1e-12)


def test_cosine_cases():
    u = np.array([1.0, 2.0, -3.0])
    assert distance(u, u, COS) == pytest.approx(0.0, abs=1e-15)
    assert distance([1.0, 0.0], [0.0, 1.0], COS) == pytest.approx(1.0)
    assert distance(u, -u, COS) == pytest.approx(2.0)


def test_cosine_zero_norm_convention():
    z = np.zeros(3)
    assert distance(z, z, COS) == 0.0
    assert distance(z, [1.0, 0.0, 0.0], COS) == 1.0
    assert distance([0.0, 2.0, 0.0], z, COS) == 1.0


def test_spearman_distance_value():
    # brute force over all 3! orderings of the second argument
    assert distance([1.0, 2.0, 3.0], [1.0, 3.0, 2.0], SPR) == pytest.approx(0.5)
    for perm in itertools.permutations([1.0, 2.0, 3.0]):
        expected = 1.0 - spearman_list([1.0, 2.0, 3.0], list(perm))
        assert distance([1.0, 2.0, 3.0], list(perm), SPR) == pytest.approx(expected, abs=1e-12)


def test_spearman_rho_values():
    assert spearman_rho([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5)
    assert spearman_rho([3, 1, 2], [3, 1, 2]) == pytest.approx(1.0)
    assert spearman_rho([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)


def test_spearman_rho_degenerate():
    assert math.isnan(spearman_rho([1, 1, 1], [1, 2, 3]))


def test_rankdata_ties():
    np.testing.assert_array_equal(rankdata([10, 20, 10, 5]), [2.5, 4.0, 2.5, 1.0])


def test_normalize_rows_uniform_fallback():
    out = normalize_rows(np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 2.0]]))
    np.testing.assert_allclose(out, [[1 / 3] * 3, [0.25, 0.25, 0.5]])


def test_normalize_representations_requires_stats():
    with pytest.raises(ValueError):
        distance([1.0, 2.0], [2.0, 1.0], DistanceKind(Distance.COSINE, True))


def test_distance_kind_parse():
    assert DistanceKind.parse("Euclidean").kind is Distance.EUCLIDEAN
    with pytest.raises(ValueError, match="cosine"):
        DistanceKind.parse("manhattan")


vec_pairs = st.integers(1, 16).flatmap(
    lambda d: st.tuples(arrays(np.float64, d, elements=finite), arrays(np.float64, d, elements=finite))
)


@given(vec_pairs)
def test_distance_symmetry(uv):
    u, v = uv
    for kind in (COS, EUC):
        assert distance(u, v, kind) == pytest.approx(distance(v, u, kind), abs=1e-12)


@given(arrays(np.float64, st.integers(2, 16), elements=finite, unique=True))
def test_self_distance_zero(u):
    for kind in (COS, EUC, SPR):
        assert distance(u, u, kind) == pytest.approx(0.0, abs=1e-12)


@given(vec_pairs, st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_cosine_scale_invariance(uv, a, b):
    u, v = uv
    if np.linalg.norm(u) < 1e-6 or np.linalg.norm(v) < 1e-6:
        return
    assert distance(a * u, b * v, COS) == pytest.approx(distance(u, v, COS), abs=1e-9)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20)
def test_rng_reproducible(seed):
    assert np.array_equal(make_rng(seed).normal(size=5), make_rng(seed).normal(size=5))

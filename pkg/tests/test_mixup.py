import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from dmada.mixup import (
    MIXED,
    SOURCE,
    TARGET,
    build_class_block,
    class_block_matrix,
    feature_mixup,
    pixel_mixup,
    sample_lambda,
    triplet_roles,
)
from dmada.tensor import ShapeError, Tensor, tsum

unit = st.floats(0, 1, allow_nan=False)
pixels = arrays(np.float64, (4, 3), elements=unit)


def test_alpha_one_is_uniform():
    lam = sample_lambda(1.0, np.random.default_rng(0), 100_000)
    assert stats.kstest(lam, "uniform").statistic < 0.01


def test_beta_two_moments():
    lam = sample_lambda(2.0, np.random.default_rng(1), 100_000)
    assert abs(lam.mean() - 0.5) < 0.005
    assert abs(lam.var() - 1 / (4 * (2 * 2 + 1))) < 0.005


def test_sample_lambda_scalar_and_validation():
    lam = sample_lambda(2.0, np.random.default_rng(0))
    assert isinstance(lam, float) and 0 <= lam <= 1
    with pytest.raises(ValueError):
        sample_lambda(0.0, np.random.default_rng(0))


def test_pixel_mixup_endpoints_and_midpoint():
    xs, xt = np.array([[0.8, 0.1]]), np.array([[0.2, 0.9]])
    xm, l = pixel_mixup(xs, xt, 1.0)
    np.testing.assert_array_equal(xm.data, xs)
    assert l == 1.0
    xm, l = pixel_mixup(xs, xt, 0.0)
    np.testing.assert_array_equal(xm.data, xt)
    assert l == 0.0
    xm, _ = pixel_mixup([[0.8]], [[0.2]], 0.5)
    assert xm.item() == 0.5


@given(pixels, pixels, unit)
def test_pixel_mixup_convex_and_symmetric(xs, xt, lam):
    xm, l = pixel_mixup(xs, xt, lam)
    assert l == lam
    assert np.all(xm.data >= np.minimum(xs, xt))
    assert np.all(xm.data <= np.maximum(xs, xt))
    swapped, _ = pixel_mixup(xt, xs, 1.0 - lam)
    np.testing.assert_array_equal(xm.data, swapped.data)


@given(pixels, pixels, st.floats(0.5, 1))
def test_pixel_mixup_is_exact_convex_combination_for_heavy_source(xs, xt, lam):
    xm, _ = pixel_mixup(xs, xt, lam)
    np.testing.assert_array_equal(xm.data, np.clip(lam * xs + (1 - lam) * xt, np.minimum(xs, xt), np.maximum(xs, xt)))


@given(pixels, pixels, unit)
def test_pixel_mixup_matches_formula_to_rounding(xs, xt, lam):
    xm, _ = pixel_mixup(xs, xt, lam)
    np.testing.assert_allclose(xm.data, lam * xs + (1 - lam) * xt, rtol=0, atol=4e-16)


def test_pixel_mixup_per_row_ratio():
    xs, xt = np.ones((3, 2)), np.zeros((3, 2))
    xm, l = pixel_mixup(xs, xt, np.array([0.0, 0.25, 1.0]))
    np.testing.assert_array_equal(xm.data[:, 0], [0.0, 0.25, 1.0])
    np.testing.assert_array_equal(l, [0.0, 0.25, 1.0])


def test_pixel_mixup_gradient_weights():
    xs = Tensor(np.full((2, 2), 0.3), requires_grad=True)
    xt = Tensor(np.full((2, 2), 0.7), requires_grad=True)
    xm, _ = pixel_mixup(xs, xt, 0.75)
    tsum(xm).backward()
    np.testing.assert_array_equal(xs.grad, 0.75)
    np.testing.assert_array_equal(xt.grad, 0.25)


def test_pixel_mixup_validation():
    with pytest.raises(ShapeError):
        pixel_mixup(np.ones((2, 2)), np.ones((2, 3)), 0.5)
    with pytest.raises(ValueError):
        pixel_mixup(np.ones(2), np.ones(2), 1.5)


def test_feature_mixup_examples():
    mu, sg = feature_mixup([[2.0, 0.0]], [[1.0, 1.0]], [[0.0, 2.0]], [[3.0, 3.0]], 1.0)
    np.testing.assert_array_equal(mu.data, [[2.0, 0.0]])
    np.testing.assert_array_equal(sg.data, [[1.0, 1.0]])
    mu, _ = feature_mixup([[2.0, 0.0]], [[1.0, 1.0]], [[0.0, 2.0]], [[1.0, 1.0]], 0.5)
    np.testing.assert_array_equal(mu.data, [[1.0, 1.0]])


@given(arrays(np.float64, (2, 3), elements=st.floats(0.01, 5)), unit)
def test_feature_mixup_fixed_point(sigma, lam):
    _, sg = feature_mixup(np.zeros((2, 3)), sigma, np.ones((2, 3)), sigma, lam)
    np.testing.assert_allclose(sg.data, sigma, rtol=1e-15)


def test_feature_mixup_shape_check():
    with pytest.raises(ShapeError):
        feature_mixup(np.zeros((2, 3)), np.ones((2, 3)), np.zeros((2, 2)), np.ones((2, 2)), 0.5)


def test_class_blocks():
    b = build_class_block("source", 10, 3)
    np.testing.assert_array_equal(b.l_cls, np.eye(10)[3])
    assert b.l_comp == 0.0
    b = build_class_block("target", 10)
    np.testing.assert_array_equal(b.l_cls, np.zeros(10))
    assert b.l_comp == 1.0
    b = build_class_block("mixup", 10, 3, 0.6)
    assert b.l_cls[3] == 0.6 and b.l_cls.sum() == 0.6
    assert b.l_comp == pytest.approx(0.4, abs=1e-16)
    assert b.as_row().shape == (11,)


def test_class_block_errors():
    with pytest.raises(ValueError):
        build_class_block("source", 10)
    with pytest.raises(ValueError):
        build_class_block("mixup", 10, 3)
    with pytest.raises(ValueError):
        build_class_block("source", 10, 10)
    with pytest.raises(ValueError):
        build_class_block("other", 10, 1)


@given(st.integers(2, 12).flatmap(lambda k: st.tuples(st.just(k), st.integers(0, k - 1))), unit,
       st.sampled_from(["source", "target", "mixup"]))
def test_label_normalization(k_y, lam, kind):
    K, y = k_y
    b = build_class_block(kind, K, y, lam)
    assert b.l_cls.sum() + b.l_comp == 1.0


def test_block_matrix_matches_rows():
    y = np.array([0, 2, 1])
    m = class_block_matrix("mixup", 3, y, 0.3)
    for row, label in zip(m, y):
        np.testing.assert_array_equal(row, build_class_block("mixup", 3, label, 0.3).as_row())
    np.testing.assert_array_equal(class_block_matrix("target", 3, batch=2), [[0, 0, 0, 1]] * 2)
    np.testing.assert_array_equal(class_block_matrix("source", 3, y).sum(axis=1), 1.0)


def test_triplet_roles_examples():
    a, p, n, m = triplet_roles(0.9)
    assert (a, p, n) == (MIXED, SOURCE, TARGET) and m == pytest.approx(0.8)
    assert triplet_roles(0.5) == (MIXED, SOURCE, TARGET, 0.0)
    a, p, n, m = triplet_roles(0.1)
    assert (a, p, n) == (MIXED, TARGET, SOURCE) and m == pytest.approx(0.8)


@given(unit)
def test_margin_is_symmetric(lam):
    assert triplet_roles(lam)[3] == pytest.approx(triplet_roles(1 - lam)[3], abs=1e-15)
    assert triplet_roles(0.0)[3] == triplet_roles(1.0)[3] == 1.0

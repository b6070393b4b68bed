import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from persfl.errors import DimensionError, ParameterError
from persfl.nn import cross_entropy, kl_div, softmax_t

from oracles import ce_rows, kl_rows


def test_softmax_symmetric():
    np.testing.assert_allclose(softmax_t(np.array([[0.0, 0.0]]), 1.0), [[0.5, 0.5]])


def test_softmax_ln2():
    np.testing.assert_allclose(softmax_t(np.array([[math.log(2), 0.0]]), 1.0),
                               [[2 / 3, 1 / 3]], rtol=0, atol=1e-15)


def test_softmax_high_temperature_is_uniform():
    p = softmax_t(np.array([[3.0, 1.0, -2.0]]), 1e6)
    assert np.all(np.abs(p - 1 / 3) < 1e-5)


@pytest.mark.parametrize("T", [0.0, -1.0])
def test_softmax_rejects_non_positive_temperature(T):
    with pytest.raises(ParameterError):
        softmax_t(np.zeros((1, 2)), T)


def test_softmax_stable_for_huge_logits():
    p = softmax_t(np.array([[1000.0, 0.0, -1000.0]]), 1.0)
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=1), 1.0)


finite_logits = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 8)),
                       elements=st.floats(-50, 50, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(finite_logits, st.floats(1e-3, 1e6))
def test_softmax_rows_sum_to_one(z, T):
    p = softmax_t(z, T)
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-9)
    assert np.all(np.isfinite(p))


@settings(max_examples=200, deadline=None)
@given(finite_logits, st.floats(1e-1, 1e3), st.floats(-30, 30))
def test_softmax_shift_invariant(z, T, c):
    np.testing.assert_allclose(softmax_t(z + c, T), softmax_t(z, T), rtol=0, atol=1e-12)


def test_cross_entropy_perfect_prediction():
    assert cross_entropy(np.array([[0.0, 1.0, 0.0]]), [1]) == 0.0


def test_cross_entropy_uniform_ten_classes():
    assert abs(cross_entropy(np.full((3, 10), 0.1), [0, 4, 9]) - math.log(10)) < 1e-9


def test_cross_entropy_is_mean_of_rows():
    probs = np.array([[0.7, 0.2, 0.1], [0.25, 0.25, 0.5]])
    labels = [0, 2]
    expected = ce_rows(probs, labels)
    assert abs(cross_entropy(probs, labels) - expected) < 1e-15
    assert abs(expected - (-math.log(0.7) - math.log(0.5)) / 2) < 1e-15


def test_cross_entropy_clamps_zero_probability():
    assert cross_entropy(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-math.log(1e-12))


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy(np.full((2, 3), 1 / 3), [0, 3])


def test_kl_identity_is_zero():
    p = np.array([[0.2, 0.3, 0.5]])
    assert kl_div(p, p) == 0.0


def test_kl_point_mass_vs_uniform():
    assert abs(kl_div(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]])) - math.log(2)) < 1e-15


def test_kl_matches_term_by_term_sum(rng):
    p = rng.dirichlet(np.ones(6), size=4)
    q = rng.dirichlet(np.ones(6), size=4)
    assert abs(kl_div(p, q) - kl_rows(p, q)) < 1e-12


def test_kl_shape_mismatch():
    with pytest.raises(DimensionError):
        kl_div(np.full((1, 2), 0.5), np.full((1, 3), 1 / 3))


prob_rows = st.integers(2, 7).flatmap(
    lambda c: st.lists(st.lists(st.floats(1e-3, 1.0), min_size=c, max_size=c),
                       min_size=1, max_size=5))


@settings(max_examples=200, deadline=None)
@given(prob_rows, st.randoms(use_true_random=False))
def test_kl_non_negative_and_zero_only_on_equality(rows, rnd):
    p = np.array(rows)
    p = p / p.sum(axis=1, keepdims=True)
    q = p[:, ::-1].copy() if rnd.random() < 0.5 else np.roll(p, 1, axis=1)
    d = kl_div(p, q)
    assert d >= -1e-9
    if np.max(np.abs(p - q)) > 1e-9:
        assert d > 0
    assert abs(kl_div(p, p)) <= 1e-9

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from orthomerge.errors import EmptyInputError, RecipeError, ShapeMismatchError
from orthomerge.euclidean import (
    EuclideanKind,
    EuclideanMethod,
    euclidean_merge,
    task_rng,
    ties_trim,
)

finite = st.floats(-10, 10, allow_nan=False, width=64)


def test_ta_single_delta_is_identity():
    d = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_array_equal(euclidean_merge([d]), d)


def test_ta_default_scale_contexts():
    ds = [np.ones((2, 2)), 2 * np.ones((2, 2))]
    np.testing.assert_array_equal(euclidean_merge(ds), 3 * np.ones((2, 2)))
    np.testing.assert_allclose(euclidean_merge(ds, default_scale=0.5), 1.5 * np.ones((2, 2)))
    explicit = EuclideanMethod(scale=0.3)
    np.testing.assert_allclose(euclidean_merge(ds, explicit, default_scale=0.5), 0.9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4, 5), elements=finite), st.floats(-5, 5))
def test_ta_linearity(stacked, alpha):
    m = EuclideanMethod(scale=0.7)
    lhs = euclidean_merge(list(alpha * stacked), m)
    rhs = alpha * euclidean_merge(list(stacked), m)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-9)


def test_simple_average():
    ds = [np.full((2, 3), v) for v in (1.0, 2.0, 6.0)]
    np.testing.assert_allclose(euclidean_merge(ds, EuclideanMethod("simple_avg")), 3.0)


def test_ties_trim_keeps_top_fraction_with_stable_ties():
    d = np.array([[1.0, -3.0], [3.0, 0.5]])
    np.testing.assert_array_equal(ties_trim(d, 0.25), [[0.0, -3.0], [0.0, 0.0]])
    np.testing.assert_array_equal(ties_trim(d, 0.5), [[0.0, -3.0], [3.0, 0.0]])
    np.testing.assert_array_equal(ties_trim(d, 1.0), d)
    # ceil(0.3 * 4) = 2
    assert np.count_nonzero(ties_trim(d, 0.3)) == 2


def test_ties_opposite_signs_elect_plus():
    a = np.array([[1.0, -2.0], [3.0, -4.0]])
    m = EuclideanMethod("ties", scale=0.5, ties_keep_fraction=1.0)
    np.testing.assert_array_equal(euclidean_merge([a, -a], m), 0.5 * np.abs(a))


def test_ties_disjoint_mean():
    d1 = np.array([[2.0, 1.0]])
    d2 = np.array([[4.0, -3.0]])
    d3 = np.array([[-1.0, -1.0]])
    m = EuclideanMethod("ties", scale=1.0, ties_keep_fraction=1.0)
    # column 0: sum +5 -> mean of 2 and 4; column 1: sum -3 -> mean of -3 and -1
    np.testing.assert_allclose(euclidean_merge([d1, d2, d3], m), [[3.0, -2.0]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3, 3), elements=finite), st.floats(0.05, 1.0))
def test_ties_sign_consistency(stacked, keep):
    m = EuclideanMethod("ties", scale=1.0, ties_keep_fraction=keep)
    out = euclidean_merge(list(stacked), m)
    trimmed = np.stack([ties_trim(t, keep) for t in stacked])
    elected = np.where(trimmed.sum(axis=0) >= 0, 1.0, -1.0)
    nz = out != 0
    assert np.all(np.sign(out[nz]) == elected[nz])


def test_dare_zero_drop_equals_ta():
    rng = np.random.default_rng(1)
    ds = [rng.standard_normal((5, 5)) for _ in range(3)]
    for seed in range(5):
        dare = EuclideanMethod("dare", scale=0.4, dare_drop_prob=0.0, seed=seed)
        ta = EuclideanMethod("ta", scale=0.4)
        np.testing.assert_array_equal(euclidean_merge(ds, dare), euclidean_merge(ds, ta))


def test_dare_unbiased_over_seeds():
    rng = np.random.default_rng(2)
    ds = [rng.standard_normal((4, 4)) for _ in range(2)]
    ta = euclidean_merge(ds)
    samples = np.stack([
        euclidean_merge(ds, EuclideanMethod("dare", dare_drop_prob=0.5, seed=s), tensor_name="w")
        for s in range(1000)])
    se = samples.std(axis=0, ddof=1) / np.sqrt(len(samples))
    assert np.all(np.abs(samples.mean(axis=0) - ta) <= 3 * se)


def test_dare_stream_depends_on_tensor_and_task_only():
    a = task_rng(5, "layer.0", 1).random(4)
    b = task_rng(5, "layer.0", 1).random(4)
    c = task_rng(5, "layer.1", 1).random(4)
    d = task_rng(5, "layer.0", 0).random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c) and not np.array_equal(a, d)


def test_dare_rescales_survivors():
    d = np.ones((50, 50))
    out = euclidean_merge([d], EuclideanMethod("dare", dare_drop_prob=0.75, seed=3))
    assert set(np.unique(out)) <= {0.0, 4.0}


@pytest.mark.parametrize("kw", [
    {"scale": 0.0}, {"scale": -1.0}, {"ties_keep_fraction": 0.0},
    {"ties_keep_fraction": 1.5}, {"dare_drop_prob": 1.0}, {"dare_drop_prob": -0.1},
])
def test_invalid_hyperparameters(kw):
    with pytest.raises(RecipeError):
        EuclideanMethod(**kw)


def test_input_errors():
    with pytest.raises(EmptyInputError):
        euclidean_merge([])
    with pytest.raises(ShapeMismatchError) as exc:
        euclidean_merge([np.zeros(3), np.zeros(4)])
    assert exc.value.task == 1


def test_method_serialization():
    m = EuclideanMethod(EuclideanKind.DARE, seed=9).resolved(0.25)
    assert m.to_dict() == {"kind": "dare", "lambda": 0.25, "ties_keep_fraction": 0.2,
                           "dare_drop_prob": 0.9, "seed": 9}

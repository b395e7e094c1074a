import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gatedrnn.numeric import (
    DimensionError,
    ParameterError,
    Rng,
    activation,
    bernoulli_mask,
    glorot_init,
    matmul,
    orthogonal_init,
    sigmoid,
)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.ones((3, 4)), np.ones((5, 2)))


def test_matmul_matches_numpy(rng):
    a, b = rng.normal((3, 4)), rng.normal((4, 2))
    np.testing.assert_array_equal(matmul(a, b), a @ b)


def test_sigmoid_frozen_values():
    np.testing.assert_allclose(sigmoid(np.array([0.0, 2.0, -2.0])),
                               [0.5, 0.8807970779778823, 0.11920292202211755], rtol=0, atol=1e-15)


def test_sigmoid_extremes_are_finite():
    out = sigmoid(np.array([1000.0, -1000.0]))
    assert np.all(np.isfinite(out))
    assert out[0] == 1.0 and out[1] == 0.0


@given(st.floats(-700, 700))
def test_sigmoid_symmetry(x):
    assert abs(sigmoid(np.array(x)) + sigmoid(np.array(-x)) - 1.0) < 1e-15


def test_activation_relu_and_unknown():
    np.testing.assert_array_equal(activation("relu", [-1.0, 0.0, 2.5]), [0.0, 0.0, 2.5])
    with pytest.raises(ParameterError):
        activation("swish", [1.0])


def test_rng_determinism_and_state_roundtrip():
    a, b = Rng(7), Rng(7)
    np.testing.assert_array_equal(a.normal(5), b.normal(5))
    state = a.get_state()
    x = a.uniform(0, 1, 4)
    a.set_state(state)
    np.testing.assert_array_equal(a.uniform(0, 1, 4), x)


def test_rng_spawn_is_independent_and_repeatable():
    r = Rng(3)
    assert r.spawn(1).normal(3).tolist() == Rng(3).spawn(1).normal(3).tolist()
    assert r.spawn(1).normal(3).tolist() != r.spawn(2).normal(3).tolist()


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32))
def test_orthogonal_gram_is_identity(rows, cols, seed):
    q = orthogonal_init(rows, cols, Rng(seed))
    g = q.T @ q if rows >= cols else q @ q.T
    np.testing.assert_allclose(g, np.eye(min(rows, cols)), atol=1e-12)


def test_orthogonal_gain():
    q = orthogonal_init(5, 5, Rng(0), gain=2.0)
    np.testing.assert_allclose(q.T @ q, 4.0 * np.eye(5), atol=1e-12)


def test_glorot_shape_and_bound():
    w = glorot_init(30, 10, Rng(0))
    assert w.shape == (10, 30)
    assert np.abs(w).max() <= np.sqrt(6.0 / 40)


def test_bernoulli_mask_values_and_mean():
    m = bernoulli_mask(200, 200, 0.8, Rng(0))
    assert set(np.unique(m)) == {0.0, 1.25}
    assert abs(m.mean() - 1.0) < 0.02


def test_bernoulli_mask_keep_all_and_invalid():
    np.testing.assert_array_equal(bernoulli_mask(2, 3, 1.0, Rng(0)), np.ones((2, 3)))
    with pytest.raises(ParameterError):
        bernoulli_mask(2, 2, 0.0, Rng(0))
    with pytest.raises(ParameterError):
        bernoulli_mask(2, 2, 1.5, Rng(0))


def test_bernoulli_mask_float32():
    m = bernoulli_mask(4, 4, 0.5, Rng(0), dtype=np.float32)
    assert m.dtype == np.float32

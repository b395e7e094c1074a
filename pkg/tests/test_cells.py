from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gatedrnn.cells import (
    GATES,
    LSTM_FORGET_BIAS,
    CellKind,
    CellParams,
    ConsistencyError,
    cell_backward,
    corrupt_gradient,
    gate_slice,
    gru_step,
    ligru_step,
    lstm_step,
    mgru_step,
    param_count,
    relu_rnn_step,
    sequence_backward,
    sequence_forward,
)
from gatedrnn.layers import BatchNorm
from gatedrnn.numeric import DimensionError, Rng

STEPS = {CellKind.GRU: gru_step, CellKind.MGRU: mgru_step, CellKind.MRELU_GRU: ligru_step,
         CellKind.RELU_RNN: relu_rnn_step}
GATED = (CellKind.GRU, CellKind.MGRU, CellKind.MRELU_GRU)


def scalar_params(kind, w, u):
    G = len(GATES[kind])
    return CellParams(kind, 1, 1, np.array(w[:G]).reshape(G, 1), np.array(u[:G]).reshape(G, 1),
                      np.zeros(G))


W3 = [0.3, -0.4, 0.7]
U3 = [0.1, 0.6, -0.5]
X, H0 = np.array([[0.5]]), np.array([[0.2]])


# hand-computed from the cell equations with D = H = 1 and zero biases
def test_gru_step_oracle():
    h, _ = gru_step(scalar_params(CellKind.GRU, W3, U3), X, H0)
    assert h[0, 0] == pytest.approx(0.24262144192659568, abs=1e-15)


def test_mgru_step_oracle():
    p = scalar_params(CellKind.MGRU, [0.3, 0.7], [0.1, -0.5])
    h, _ = mgru_step(p, X, H0)
    assert h[0, 0] == pytest.approx(0.22055487241359906, abs=1e-15)


def test_ligru_step_oracle():
    p = scalar_params(CellKind.MRELU_GRU, [0.3, 0.7], [0.1, -0.5])
    h, _ = ligru_step(p, X, H0)
    assert h[0, 0] == pytest.approx(0.22288010296128244, abs=1e-15)


def test_relu_rnn_step_oracle():
    h, _ = relu_rnn_step(scalar_params(CellKind.RELU_RNN, [0.3], [0.1]), X, H0)
    assert h[0, 0] == pytest.approx(0.17, abs=1e-15)


def test_lstm_step_oracle():
    p = scalar_params(CellKind.LSTM, [0.3, -0.4, 0.7, 0.2], [0.1, 0.6, -0.5, 0.4])
    p.b[1] = 1.0
    h, c, _ = lstm_step(p, X, H0, np.array([[-0.3]]))
    assert h[0, 0] == pytest.approx(-0.06598736004461866, abs=1e-15)
    assert c[0, 0] == pytest.approx(-0.11792193555214825, abs=1e-15)


def test_zero_everything_gives_zero_state():
    for kind in GATED:
        p = CellParams.init(kind, 3, 4, Rng(0))
        p.W[:] = 0
        p.U[:] = 0
        h, _ = STEPS[kind](p, np.zeros((2, 3)), np.zeros((2, 4)))
        np.testing.assert_array_equal(h, 0.0)


def test_gru_gates_at_half_for_zero_input():
    p = CellParams.init(CellKind.GRU, 3, 4, Rng(0))
    _, cache = gru_step(p, np.zeros((2, 3)), np.zeros((2, 4)))
    np.testing.assert_array_equal(cache.values["z"], 0.5)
    np.testing.assert_array_equal(cache.values["r"], 0.5)


@pytest.mark.parametrize("kind", GATED, ids=lambda k: k.value)
def test_saturated_update_gate_keeps_state(kind):
    # b_z = +20 with default init and unit-scale inputs; tolerance as specified
    rng = Rng(11)
    p = CellParams.init(kind, 8, 8, rng)
    p.b[gate_slice(kind, "z", 8)] = 20.0
    h0 = rng.uniform(-1, 1, (4, 8))
    h, _ = STEPS[kind](p, rng.normal((4, 8)), h0)
    np.testing.assert_allclose(h, h0, rtol=0, atol=1e-8)


@pytest.mark.parametrize("kind", GATED, ids=lambda k: k.value)
def test_state_drift_is_exactly_the_interpolation_residual(kind):
    # h_t - h_{t-1} = (1 - z)(cand - h_{t-1}), so the accumulated drift is bounded by
    # the sum of those residuals and shrinks with 1 - sigmoid(b_z)
    rng = Rng(5)
    p = CellParams.init(kind, 8, 8, rng)
    p.b[gate_slice(kind, "z", 8)] = 20.0
    h0 = rng.uniform(-1, 1, (4, 8))
    h, bound = h0, np.zeros_like(h0)
    for _ in range(50):
        h_new, cache = STEPS[kind](p, rng.normal((4, 8)), h)
        v = cache.values
        bound += np.abs((1 - v["z"]) * (v["cand"] - h))
        h = h_new
    assert np.all(np.abs(h - h0) <= bound + 1e-15)
    assert bound.max() < 50 * 1e-6


def test_recurrent_mask_only_touches_recurrent_terms():
    rng = Rng(2)
    for kind in GATED:
        p = CellParams.init(kind, 3, 4, rng)
        x, hp = rng.normal((2, 3)), rng.normal((2, 4))
        h_drop, _ = STEPS[kind](p, x, hp, drop_mask=np.zeros((2, 4)))
        q = p.copy()
        q.U[:] = 0
        h_noU, _ = STEPS[kind](q, x, hp)
        np.testing.assert_allclose(h_drop, h_noU, atol=1e-15)


@given(st.integers(0, 2**31), st.sampled_from(GATED))
def test_state_is_convex_combination(seed, kind):
    rng = Rng(seed)
    p = CellParams.init(kind, 3, 5, rng)
    hp = rng.normal((4, 5))
    h, cache = STEPS[kind](p, rng.normal((4, 3)), hp)
    cand = cache.values["cand"]
    lo, hi = np.minimum(hp, cand), np.maximum(hp, cand)
    assert np.all(h >= lo - 1e-12) and np.all(h <= hi + 1e-12)


@given(st.integers(0, 2**31))
def test_reset_clamp_matches_mgru(seed):
    rng = Rng(seed)
    g = CellParams.init(CellKind.GRU, 4, 5, rng)
    keep = np.r_[0:5, 10:15]
    m = CellParams(CellKind.MGRU, 4, 5, g.W[keep], g.U[keep], g.b[keep])
    hg = hm = np.zeros((3, 5))
    for _ in range(10):
        x = rng.normal((3, 4))
        hg, _ = gru_step(g, x, hg, clamp_reset=True)
        hm, _ = mgru_step(m, x, hm)
    np.testing.assert_allclose(hg, hm, rtol=0, atol=1e-12)


@given(st.integers(1, 200), st.integers(1, 200))
def test_param_count_ratios(d, h):
    gru = param_count(CellKind.GRU, d, h)
    assert Fraction(param_count(CellKind.MGRU, d, h), gru) == Fraction(2, 3)
    assert Fraction(param_count(CellKind.MRELU_GRU, d, h), gru) == Fraction(2, 3)
    assert Fraction(param_count(CellKind.LSTM, d, h), gru) == Fraction(4, 3)
    assert param_count(CellKind.RELU_RNN, d, h) == d * h + h * h + h


def test_param_count_frozen():
    assert param_count("gru", 40, 465) == 3 * (40 * 465 + 465 * 465 + 465)
    assert param_count("ligru", 40, 465) == 470580


def test_init_lstm_forget_bias_and_orthogonal_blocks():
    p = CellParams.init(CellKind.LSTM, 3, 6, Rng(0))
    np.testing.assert_array_equal(p.b[p.gate("f")], LSTM_FORGET_BIAS)
    np.testing.assert_array_equal(p.b[p.gate("i")], 0.0)
    Uf = p.U[p.gate("f")]
    np.testing.assert_allclose(Uf.T @ Uf, np.eye(6), atol=1e-12)


def test_shape_errors():
    p = CellParams.init(CellKind.GRU, 3, 4, Rng(0))
    with pytest.raises(DimensionError):
        gru_step(p, np.zeros((2, 5)), np.zeros((2, 4)))
    with pytest.raises(DimensionError):
        gru_step(p, np.zeros((2, 3)), np.zeros((3, 4)))
    with pytest.raises(DimensionError):
        gru_step(p, np.zeros((2, 3)), np.zeros((2, 4)), drop_mask=np.ones((2, 3)))
    with pytest.raises(DimensionError):
        CellParams(CellKind.GRU, 3, 4, np.zeros((8, 3)), np.zeros((12, 4)))


def test_wrong_params_kind():
    p = CellParams.init(CellKind.MGRU, 3, 4, Rng(0))
    with pytest.raises(ConsistencyError):
        gru_step(p, np.zeros((1, 3)), np.zeros((1, 4)))


def test_parse_aliases():
    assert CellKind.parse("M-reluGRU") is CellKind.MRELU_GRU
    assert CellKind.parse("relu_rnn") is CellKind.RELU_RNN
    with pytest.raises(ValueError):
        CellKind.parse("transformer")


def _loss_and_caches(kind, p, xs, h0, c0, masks, bn):
    h, c = h0, c0
    caches, hs, loss = [], [], 0.0
    for t, x in enumerate(xs):
        if kind is CellKind.LSTM:
            h, c, cache = lstm_step(p, x, h, c, drop_mask=masks, bn=bn, t=t)
        else:
            h, cache = STEPS[kind](p, x, h, drop_mask=masks, bn=bn, t=t)
        caches.append(cache)
        hs.append(h)
        loss += float((h * (t + 1)).sum() * 0.1 + (h * h).sum())
    return loss, caches, hs


@pytest.mark.parametrize("kind", list(CellKind), ids=lambda k: k.value)
@pytest.mark.parametrize("use_bn", [False, True], ids=["plain", "bn"])
def test_cell_backward_matches_finite_differences(kind, use_bn):
    rng = Rng(21)
    p = CellParams.init(kind, 3, 4, rng)
    bn = BatchNorm(len(GATES[kind]) * 4) if use_bn else None
    if bn is not None:
        bn.gamma[:] = rng.uniform(0.5, 1.5, bn.gamma.shape)
        bn.update_stats = False
    xs = [rng.normal((5, 3)) for _ in range(4)]
    h0 = np.zeros((5, 4))
    c0 = np.zeros((5, 4)) if kind is CellKind.LSTM else None
    masks = (rng.random((5, 4)) < 0.8) / 0.8
    _, caches, hs = _loss_and_caches(kind, p, xs, h0, c0, masks, bn)
    dh_out = [0.1 * (t + 1) + 2 * h for t, h in enumerate(hs)]
    grads, _ = cell_backward(kind, caches, dh_out, p, bn=bn)
    targets = dict(p.arrays())
    if bn is not None:
        targets["bn.gamma"] = bn.gamma
        targets["bn.beta"] = bn.beta
    eps = 1e-6
    for name, arr in targets.items():
        flat = arr.reshape(-1)
        for i in Rng(0).permutation(flat.size)[:8]:
            orig = flat[i]
            flat[i] = orig + eps
            lp, _, _ = _loss_and_caches(kind, p, xs, h0, c0, masks, bn)
            flat[i] = orig - eps
            lm, _, _ = _loss_and_caches(kind, p, xs, h0, c0, masks, bn)
            flat[i] = orig
            num = (lp - lm) / (2 * eps)
            ana = grads[name].reshape(-1)[i]
            assert abs(num - ana) <= 1e-6 * max(1.0, abs(num)), (name, i, ana, num)


def test_sequence_backward_drop_term_mutation_changes_gradient():
    rng = Rng(4)
    p = CellParams.init(CellKind.GRU, 3, 4, rng)
    a = rng.normal((6, 2, 12))
    hs, cache = sequence_forward(p, a, np.ones((2, 4)))
    dhs = rng.normal(hs.shape)
    da, dU, _ = sequence_backward(p, cache, dhs)
    with corrupt_gradient("drop-term"):
        da_bad, dU_bad, _ = sequence_backward(p, cache, dhs)
    assert not np.allclose(dU, dU_bad)
    da_again, _, _ = sequence_backward(p, cache, dhs)
    np.testing.assert_array_equal(da, da_again)
    with pytest.raises(ValueError):
        corrupt_gradient("flip-sign")


def test_sequence_forward_starts_from_zero_state():
    p = CellParams.init(CellKind.MRELU_GRU, 2, 3, Rng(0))
    a = np.zeros((1, 2, 6))
    hs, _ = sequence_forward(p, a, np.ones((2, 3)))
    np.testing.assert_array_equal(hs, 0.0)


def test_cell_backward_rejects_mismatched_lengths():
    p = CellParams.init(CellKind.GRU, 2, 3, Rng(0))
    _, cache = gru_step(p, np.zeros((1, 2)), np.zeros((1, 3)))
    with pytest.raises(ConsistencyError):
        cell_backward(CellKind.GRU, [cache], [], p)
    with pytest.raises(ConsistencyError):
        cell_backward(CellKind.MGRU, [cache], [np.zeros((1, 3))], p)

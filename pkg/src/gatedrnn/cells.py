"""Recurrent cells: ReLU-RNN, LSTM, GRU, M-GRU and M-reluGRU.

Every cell is written as a forward kernel that records a :class:`StepCache`
and a matching backward kernel that consumes it. Gradients are derived by
hand; nothing here builds an autodiff graph.

Weight layout is ``y = x @ W.T``: ``W`` has shape ``(G*H, D)``, ``U`` has
shape ``(G*H, H)`` and ``b`` has shape ``(G*H,)``, where the ``G`` gate
blocks are stacked in the order given by :data:`GATES`.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .numeric import (
    DEFAULT_DTYPE,
    DimensionError,
    glorot_init,
    orthogonal_init,
    sigmoid,
)


class ConsistencyError(RuntimeError):
    """A cache does not belong to the cell it is being replayed through."""


class CellKind(Enum):
    RELU_RNN = "relu-rnn"
    LSTM = "lstm"
    GRU = "gru"
    MGRU = "mgru"
    MRELU_GRU = "ligru"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        aliases = {
            "relu-rnn": cls.RELU_RNN, "relurnn": cls.RELU_RNN, "relu_rnn": cls.RELU_RNN,
            "lstm": cls.LSTM,
            "gru": cls.GRU,
            "mgru": cls.MGRU, "m-gru": cls.MGRU,
            "ligru": cls.MRELU_GRU, "m-relugru": cls.MRELU_GRU, "mrelugru": cls.MRELU_GRU,
        }
        try:
            return aliases[str(name).lower()]
        except KeyError:
            raise ValueError(f"unknown architecture {name!r}") from None

    @property
    def label(self):
        return {
            CellKind.RELU_RNN: "relu-RNN",
            CellKind.LSTM: "LSTM",
            CellKind.GRU: "GRU",
            CellKind.MGRU: "M-GRU",
            CellKind.MRELU_GRU: "M-reluGRU",
        }[self]


GATES = {
    CellKind.RELU_RNN: ("h",),
    CellKind.LSTM: ("i", "f", "o", "g"),
    CellKind.GRU: ("z", "r", "h"),
    CellKind.MGRU: ("z", "h"),
    CellKind.MRELU_GRU: ("z", "h"),
}

# gates whose activation is a sigmoid, i.e. the ones a gate trace reports
SIGMOID_GATES = {
    CellKind.RELU_RNN: (),
    CellKind.LSTM: ("i", "f", "o"),
    CellKind.GRU: ("z", "r"),
    CellKind.MGRU: ("z",),
    CellKind.MRELU_GRU: ("z",),
}

LSTM_FORGET_BIAS = 1.0


def param_count(kind, input_dim, hidden_dim):
    """Number of trainable cell parameters (W, U and b for every gate)."""
    kind = CellKind.parse(kind)
    if input_dim < 1 or hidden_dim < 1:
        raise ValueError("dims must be >= 1")
    per_gate = input_dim * hidden_dim + hidden_dim * hidden_dim + hidden_dim
    return len(GATES[kind]) * per_gate


@dataclass
class CellParams:
    kind: CellKind
    input_dim: int
    hidden_dim: int
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray = None  # None when a batch norm shift replaces the bias

    def __post_init__(self):
        G, H, D = len(GATES[self.kind]), self.hidden_dim, self.input_dim
        if self.W.shape != (G * H, D) or self.U.shape != (G * H, H):
            raise DimensionError(
                f"{self.kind.value}: W {self.W.shape} / U {self.U.shape} "
                f"inconsistent with input_dim={D}, hidden_dim={H}"
            )
        if self.b is not None and self.b.shape != (G * H,):
            raise DimensionError(f"{self.kind.value}: bias shape {self.b.shape}")

    @classmethod
    def init(cls, kind, input_dim, hidden_dim, rng, bias=True, orth_gain=1.0,
             dtype=DEFAULT_DTYPE):
        """Glorot feed-forward weights, orthogonal recurrent weights, zero bias.

        Each gate block is initialized independently. The LSTM forget bias
        starts at 1.
        """
        kind = CellKind.parse(kind)
        gates = GATES[kind]
        W = np.concatenate([glorot_init(input_dim, hidden_dim, rng, dtype) for _ in gates])
        U = np.concatenate(
            [orthogonal_init(hidden_dim, hidden_dim, rng, orth_gain, dtype) for _ in gates]
        )
        b = None
        if bias:
            b = np.zeros(len(gates) * hidden_dim, dtype=dtype)
            if kind is CellKind.LSTM:
                b[gate_slice(kind, "f", hidden_dim)] = LSTM_FORGET_BIAS
        return cls(kind, input_dim, hidden_dim, W, U, b)

    @property
    def gates(self):
        return GATES[self.kind]

    def gate(self, name):
        return gate_slice(self.kind, name, self.hidden_dim)

    def arrays(self):
        out = {"W": self.W, "U": self.U}
        if self.b is not None:
            out["b"] = self.b
        return out

    def copy(self):
        return CellParams(self.kind, self.input_dim, self.hidden_dim, self.W.copy(),
                          self.U.copy(), None if self.b is None else self.b.copy())


def gate_slice(kind, name, hidden_dim):
    idx = GATES[CellKind.parse(kind)].index(name)
    return slice(idx * hidden_dim, (idx + 1) * hidden_dim)


@dataclass
class StepCache:
    """Activations saved by one forward step for the backward pass."""

    kind: CellKind
    t: int
    values: dict
    x: np.ndarray = None
    bn_cache: object = None
    rbn_caches: list = field(default_factory=list)


# --- mutation hook for gradient-checker self tests ------------------------

_MUTATION = None


class corrupt_gradient:
    """Context manager that drops one term from every cell's backward pass.

    Only ``"drop-term"`` is supported. It exists so the gradient checker can
    prove it catches a wrong derivative. Not thread safe.
    """

    def __init__(self, mode="drop-term"):
        if mode != "drop-term":
            raise ValueError(f"unknown mutation {mode!r}")
        self.mode = mode

    def __enter__(self):
        global _MUTATION
        self._prev, _MUTATION = _MUTATION, self.mode
        return self

    def __exit__(self, *exc):
        global _MUTATION
        _MUTATION = self._prev


# --- kernels ---------------------------------------------------------------

def _rec(rbn, t, u, valid, sl, rb):
    if rbn is None:
        return u
    out, cache = rbn.forward(t, u, valid, sl)
    rb.append(cache)
    return out


def forward_step(p, a, h_prev, m, c_prev=None, t=0, valid=None, rbn=None,
                 clamp_reset=False):
    """Advance one step given the feed-forward pre-activation ``a`` (B, G*H).

    ``m`` is the recurrent dropout mask applied to ``h_prev`` before every
    recurrent product. ``rbn`` optionally normalizes the recurrent terms.
    Returns ``(h, c, cache)``; ``c`` is ``None`` except for the LSTM.
    """
    kind, H = p.kind, p.hidden_dim
    hm = h_prev * m
    rb = []
    c = None
    if kind is CellKind.GRU:
        u = _rec(rbn, t, hm @ p.U[: 2 * H].T, valid, slice(0, 2 * H), rb)
        z = sigmoid(a[:, :H] + u[:, :H])
        if clamp_reset:
            r = np.ones_like(z)
        else:
            r = sigmoid(a[:, H: 2 * H] + u[:, H:])
        q = hm * r
        cand = np.tanh(a[:, 2 * H:] + _rec(rbn, t, q @ p.U[2 * H:].T, valid,
                                           slice(2 * H, 3 * H), rb))
        h = z * h_prev + (1.0 - z) * cand
        vals = dict(h_prev=h_prev, hm=hm, z=z, r=r, q=q, cand=cand,
                    clamp_reset=clamp_reset)
    elif kind is CellKind.MGRU or kind is CellKind.MRELU_GRU:
        u = _rec(rbn, t, hm @ p.U.T, valid, slice(0, 2 * H), rb)
        z = sigmoid(a[:, :H] + u[:, :H])
        pre = a[:, H:] + u[:, H:]
        cand = np.tanh(pre) if kind is CellKind.MGRU else np.maximum(pre, 0.0)
        h = z * h_prev + (1.0 - z) * cand
        vals = dict(h_prev=h_prev, hm=hm, z=z, cand=cand)
    elif kind is CellKind.RELU_RNN:
        pre = a + _rec(rbn, t, hm @ p.U.T, valid, slice(0, H), rb)
        h = np.maximum(pre, 0.0)
        vals = dict(hm=hm, h=h)
    elif kind is CellKind.LSTM:
        pre = a + _rec(rbn, t, hm @ p.U.T, valid, slice(0, 4 * H), rb)
        ifo = sigmoid(pre[:, : 3 * H])
        i, f, o = ifo[:, :H], ifo[:, H: 2 * H], ifo[:, 2 * H:]
        g = np.tanh(pre[:, 3 * H:])
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        vals = dict(hm=hm, i=i, f=f, o=o, g=g, c_prev=c_prev, tc=tc)
    else:  # pragma: no cover
        raise ConsistencyError(f"unsupported cell {kind}")
    return h, c, StepCache(kind, t, vals, rbn_caches=rb)


def backward_step(p, cache, dh, m, dU, dc=None, rbn=None, dgamma_r=None):
    """Backpropagate one step.

    ``dh`` (and ``dc`` for the LSTM) is the total gradient reaching this
    step's outputs. Accumulates into ``dU`` (and ``dgamma_r`` when recurrent
    normalization is active). Returns ``(da, dh_prev, dc_prev)``.
    """
    kind, H = p.kind, p.hidden_dim
    if cache.kind is not kind:
        raise ConsistencyError(f"cache from {cache.kind.value} replayed through {kind.value}")
    v = cache.values
    rb = cache.rbn_caches
    drop = _MUTATION == "drop-term"

    def rec_back(dout, idx, sl):
        if rbn is None:
            return dout
        du, dg = rbn.backward(rb[idx], dout)
        dgamma_r[sl] += dg
        return du

    dc_prev = None
    if kind is CellKind.GRU:
        z, r, q, cand, hm, h_prev = v["z"], v["r"], v["q"], v["cand"], v["hm"], v["h_prev"]
        dz = dh * (h_prev - cand)
        dph = dh * (1.0 - z) * (1.0 - cand * cand)
        dh_prev = np.zeros_like(dh) if drop else dh * z
        duh = rec_back(dph, -1, slice(2 * H, 3 * H))
        dU[2 * H:] += duh.T @ q
        dq = duh @ p.U[2 * H:]
        dpz = dz * z * (1.0 - z)
        if v["clamp_reset"]:
            dpr = np.zeros_like(dpz)
        else:
            dpr = (dq * hm) * r * (1.0 - r)
        dzr = rec_back(np.concatenate([dpz, dpr], axis=1), 0, slice(0, 2 * H))
        dU[: 2 * H] += dzr.T @ hm
        dhm = dq * r + dzr @ p.U[: 2 * H]
        dh_prev = dh_prev + dhm * m
        da = np.concatenate([dpz, dpr, dph], axis=1)
    elif kind is CellKind.MGRU or kind is CellKind.MRELU_GRU:
        z, cand, hm, h_prev = v["z"], v["cand"], v["hm"], v["h_prev"]
        dz = dh * (h_prev - cand)
        dcand = dh * (1.0 - z)
        if kind is CellKind.MGRU:
            dph = dcand * (1.0 - cand * cand)
        else:
            dph = dcand * (cand > 0.0)
        dpz = dz * z * (1.0 - z)
        da = np.concatenate([dpz, dph], axis=1)
        du = rec_back(da, 0, slice(0, 2 * H))
        dU += du.T @ hm
        dh_prev = (du @ p.U) * m
        if not drop:
            dh_prev += dh * z
    elif kind is CellKind.RELU_RNN:
        da = dh * (v["h"] > 0.0)
        du = rec_back(da, 0, slice(0, H))
        dU += du.T @ v["hm"]
        dh_prev = np.zeros_like(dh) if drop else (du @ p.U) * m
    elif kind is CellKind.LSTM:
        i, f, o, g, tc, c_prev = v["i"], v["f"], v["o"], v["g"], v["tc"], v["c_prev"]
        dct = dh * o * (1.0 - tc * tc)
        if dc is not None:
            dct = dct + dc
        da = np.concatenate([
            dct * g * i * (1.0 - i),
            dct * c_prev * f * (1.0 - f),
            dh * tc * o * (1.0 - o),
            dct * i * (1.0 - g * g),
        ], axis=1)
        du = rec_back(da, 0, slice(0, 4 * H))
        dU += du.T @ v["hm"]
        dh_prev = (du @ p.U) * m
        dc_prev = np.zeros_like(dct) if drop else dct * f
    else:  # pragma: no cover
        raise ConsistencyError(f"unsupported cell {kind}")
    return da, dh_prev, dc_prev


# --- single-step public API -----------------------------------------------

def _check_step_shapes(p, x_t, h_prev, drop_mask):
    x_t = np.asarray(x_t)
    h_prev = np.asarray(h_prev)
    if x_t.ndim != 2 or x_t.shape[1] != p.input_dim:
        raise DimensionError(f"x_t shape {x_t.shape} does not match input_dim={p.input_dim}")
    if h_prev.shape != (x_t.shape[0], p.hidden_dim):
        raise DimensionError(
            f"h_prev shape {h_prev.shape}, expected {(x_t.shape[0], p.hidden_dim)}"
        )
    if drop_mask is None:
        drop_mask = np.ones_like(h_prev)
    elif np.shape(drop_mask) != h_prev.shape:
        raise DimensionError(f"drop_mask shape {np.shape(drop_mask)} != h_prev {h_prev.shape}")
    return x_t, h_prev, drop_mask


def _feedforward(p, x_t, bn):
    a = x_t @ p.W.T
    bn_cache = None
    if bn is not None:
        a, bn_cache = bn.forward(a)
    if p.b is not None:
        a = a + p.b
    return a, bn_cache


def _step(kind, p, x_t, h_prev, drop_mask, bn=None, c_prev=None, t=0, clamp_reset=False):
    if p.kind is not kind:
        raise ConsistencyError(f"expected {kind.value} params, got {p.kind.value}")
    x_t, h_prev, drop_mask = _check_step_shapes(p, x_t, h_prev, drop_mask)
    a, bn_cache = _feedforward(p, x_t, bn)
    h, c, cache = forward_step(p, a, h_prev, drop_mask, c_prev=c_prev, t=t,
                               clamp_reset=clamp_reset)
    cache.x = x_t
    cache.bn_cache = bn_cache
    cache.values["mask"] = drop_mask
    return h, c, cache


def gru_step(p, x_t, h_prev, drop_mask=None, bn=None, t=0, clamp_reset=False):
    """Standard GRU step. ``clamp_reset`` fixes the reset gate at 1."""
    h, _, cache = _step(CellKind.GRU, p, x_t, h_prev, drop_mask, bn, t=t,
                        clamp_reset=clamp_reset)
    return h, cache


def mgru_step(p, x_t, h_prev, drop_mask=None, bn=None, t=0):
    h, _, cache = _step(CellKind.MGRU, p, x_t, h_prev, drop_mask, bn, t=t)
    return h, cache


def ligru_step(p, x_t, h_prev, drop_mask=None, bn=None, t=0):
    """M-reluGRU step: update gate only, ReLU candidate.

    With ``bn`` given, the feed-forward terms ``x_t @ W.T`` are normalized
    before the recurrent terms are added.
    """
    h, _, cache = _step(CellKind.MRELU_GRU, p, x_t, h_prev, drop_mask, bn, t=t)
    return h, cache


def relu_rnn_step(p, x_t, h_prev, drop_mask=None, bn=None, t=0):
    h, _, cache = _step(CellKind.RELU_RNN, p, x_t, h_prev, drop_mask, bn, t=t)
    return h, cache


def lstm_step(p, x_t, h_prev, c_prev, drop_mask=None, bn=None, t=0):
    if np.shape(c_prev) != np.shape(h_prev):
        raise DimensionError(f"c_prev shape {np.shape(c_prev)} != h_prev {np.shape(h_prev)}")
    return _step(CellKind.LSTM, p, x_t, h_prev, drop_mask, bn, c_prev=c_prev, t=t)


STEP_FUNCTIONS = {
    CellKind.GRU: gru_step,
    CellKind.MGRU: mgru_step,
    CellKind.MRELU_GRU: ligru_step,
    CellKind.RELU_RNN: relu_rnn_step,
}


def cell_backward(kind, caches, grad_h_out, p, bn=None):
    """Full-sequence BPTT through caches recorded by the ``*_step`` functions.

    ``grad_h_out[t]`` is the loss gradient arriving at ``h_t`` from outside
    the recurrence. No truncation: every step feeds the one before it.
    Returns ``(grads, dxs)`` where ``grads`` has ``W``, ``U``, ``b`` (if the
    cell has a bias) and ``bn.gamma``/``bn.beta`` (if ``bn`` was used).
    """
    kind = CellKind.parse(kind)
    if p.kind is not kind:
        raise ConsistencyError(f"params are {p.kind.value}, backward asked for {kind.value}")
    if len(caches) != len(grad_h_out):
        raise ConsistencyError(f"{len(caches)} caches but {len(grad_h_out)} gradients")
    dW = np.zeros_like(p.W)
    dU = np.zeros_like(p.U)
    db = None if p.b is None else np.zeros_like(p.b)
    grads = {"W": dW, "U": dU}
    if bn is not None:
        grads["bn.gamma"] = np.zeros_like(bn.gamma)
        grads["bn.beta"] = np.zeros_like(bn.beta)
    dxs = [None] * len(caches)
    dh_next = None
    dc_next = None
    for t in reversed(range(len(caches))):
        cache = caches[t]
        if cache.kind is not kind:
            raise ConsistencyError(f"step {t} cache is {cache.kind.value}, expected {kind.value}")
        dh = np.asarray(grad_h_out[t], dtype=dU.dtype)
        if dh_next is not None:
            dh = dh + dh_next
        da, dh_next, dc_next = backward_step(p, cache, dh, cache.values["mask"], dU, dc=dc_next)
        if db is not None:
            db += da.sum(axis=0)
        if bn is not None:
            da, dgamma, dbeta = bn.backward(cache.bn_cache, da)
            grads["bn.gamma"] += dgamma
            grads["bn.beta"] += dbeta
        dW += da.T @ cache.x
        dxs[t] = da @ p.W
    if db is not None:
        grads["b"] = db
    return grads, dxs


# --- sequence drivers used by the layers ---------------------------------

@dataclass
class SequenceCache:
    steps: list
    mask: np.ndarray


def sequence_forward(p, a, drop_mask, valid=None, rbn=None, clamp_reset=False):
    """Run the recurrence over time-major feed-forward terms ``a`` (T, B, G*H).

    The initial state (and LSTM cell) is zero. Returns ``(hs, cache)`` with
    ``hs`` of shape (T, B, H).
    """
    T, B, _ = a.shape
    H = p.hidden_dim
    h = np.zeros((B, H), dtype=a.dtype)
    c = np.zeros((B, H), dtype=a.dtype) if p.kind is CellKind.LSTM else None
    hs = np.empty((T, B, H), dtype=a.dtype)
    steps = []
    for t in range(T):
        vt = None if valid is None else valid[t]
        h, c, cache = forward_step(p, a[t], h, drop_mask, c_prev=c, t=t, valid=vt,
                                   rbn=rbn, clamp_reset=clamp_reset)
        hs[t] = h
        steps.append(cache)
    return hs, SequenceCache(steps, drop_mask)


def sequence_backward(p, cache, dhs, rbn=None):
    """BPTT over a whole sequence. Returns ``(da, dU, dgamma_r)``."""
    T, B, H = dhs.shape
    da = np.empty((T, B, len(p.gates) * H), dtype=dhs.dtype)
    dU = np.zeros_like(p.U)
    dgamma_r = None if rbn is None else np.zeros_like(rbn.gamma)
    dh_next = np.zeros((B, H), dtype=dhs.dtype)
    dc_next = None
    for t in reversed(range(T)):
        da[t], dh_next, dc_next = backward_step(
            p, cache.steps[t], dhs[t] + dh_next, cache.mask, dU, dc=dc_next,
            rbn=rbn, dgamma_r=dgamma_r,
        )
    return da, dU, dgamma_r

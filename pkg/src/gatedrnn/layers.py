"""Batch normalization, bidirectional layers, layer stacking and the softmax head."""

from dataclasses import dataclass

import numpy as np

from .cells import (
    GATES,
    SIGMOID_GATES,
    CellKind,
    CellParams,
    LSTM_FORGET_BIAS,
    gate_slice,
    sequence_backward,
    sequence_forward,
)
from .numeric import DEFAULT_DTYPE, DimensionError, bernoulli_mask, glorot_init

IGNORE_LABEL = -1
BN_GAMMA_INIT = 0.1
BN_VARIANTS = (None, "feedforward", "recurrent")


class DegenerateBatchError(ValueError):
    """Train-mode batch norm needs at least two valid rows."""


class EmptyBatchError(ValueError):
    """The loss was asked to average over zero valid frames."""


def _valid_rows(valid, n):
    if valid is None:
        return np.ones(n, dtype=bool)
    return np.asarray(valid, dtype=bool).reshape(n)


class BatchNorm:
    """Per-feature batch normalization over the valid rows of a 2-D batch.

    In train mode the batch statistics are used and the running estimates
    are updated with an exponential moving average. In eval mode the output
    is the fixed affine map given by the running estimates. Invalid rows
    come out as zeros and never touch the statistics.
    """

    def __init__(self, num_features, gamma_init=BN_GAMMA_INIT, eps=1e-5, momentum=0.1,
                 dtype=DEFAULT_DTYPE):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.gamma = np.full(num_features, gamma_init, dtype=dtype)
        self.beta = np.zeros(num_features, dtype=dtype)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.eps = eps
        self.momentum = momentum
        self.mode = "train"
        self.update_stats = True

    def forward(self, x, valid=None):
        n_rows = x.shape[0]
        rows = _valid_rows(valid, n_rows)
        if self.mode == "train":
            n = int(rows.sum())
            if n < 2:
                raise DegenerateBatchError(f"batch norm in train mode got {n} valid rows")
            xv = x[rows]
            mu = xv.mean(axis=0)
            var = xv.var(axis=0)
            if self.update_stats:
                m = self.momentum
                self.running_mean *= 1.0 - m
                self.running_mean += m * mu
                self.running_var *= 1.0 - m
                self.running_var += m * var * (n / (n - 1))
        else:
            n = 0
            mu, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        out = self.gamma * xhat + self.beta
        if not rows.all():
            out[~rows] = 0.0
            xhat[~rows] = 0.0
        return out, (xhat, inv, rows, n)

    def backward(self, cache, dout):
        xhat, inv, rows, n = cache
        dout = dout * rows[:, None] if not rows.all() else dout
        dgamma = (dout * xhat).sum(axis=0)
        dbeta = dout.sum(axis=0)
        dxhat = dout * self.gamma
        if n == 0:
            return dxhat * inv, dgamma, dbeta
        dx = (inv / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        if not rows.all():
            dx[~rows] = 0.0
        return dx, dgamma, dbeta

    def arrays(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class RecurrentBatchNorm:
    """Normalizes recurrent pre-activations with separate statistics per timestep.

    The scale ``gamma`` is shared across time. There is no shift: the
    feed-forward batch norm already provides one. A timestep with fewer than
    two valid rows falls back to the running estimates for that step.
    """

    def __init__(self, num_features, gamma_init=BN_GAMMA_INIT, eps=1e-5, momentum=0.1,
                 dtype=DEFAULT_DTYPE):
        self.gamma = np.full(num_features, gamma_init, dtype=dtype)
        self.running_mean = np.zeros((0, num_features), dtype=dtype)
        self.running_var = np.ones((0, num_features), dtype=dtype)
        self.eps = eps
        self.momentum = momentum
        self.mode = "train"
        self.update_stats = True
        self._dtype = dtype

    def _ensure(self, t):
        have = self.running_mean.shape[0]
        if t >= have:
            F = self.gamma.shape[0]
            extra = t + 1 - have
            self.running_mean = np.concatenate(
                [self.running_mean, np.zeros((extra, F), dtype=self._dtype)])
            self.running_var = np.concatenate(
                [self.running_var, np.ones((extra, F), dtype=self._dtype)])

    def _running(self, t, sl):
        if self.running_mean.shape[0] == 0:
            F = sl.stop - sl.start
            return np.zeros(F, dtype=self._dtype), np.ones(F, dtype=self._dtype)
        t = min(t, self.running_mean.shape[0] - 1)
        return self.running_mean[t, sl], self.running_var[t, sl]

    def forward(self, t, u, valid, sl):
        rows = _valid_rows(valid, u.shape[0])
        n = int(rows.sum())
        if self.mode == "train" and n >= 2:
            uv = u[rows]
            mu = uv.mean(axis=0)
            var = uv.var(axis=0)
            if self.update_stats:
                self._ensure(t)
                m = self.momentum
                self.running_mean[t, sl] = (1 - m) * self.running_mean[t, sl] + m * mu
                self.running_var[t, sl] = ((1 - m) * self.running_var[t, sl]
                                           + m * var * (n / (n - 1)))
        else:
            n = 0
            mu, var = self._running(t, sl)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (u - mu) * inv
        if not rows.all():
            xhat[~rows] = 0.0
        return self.gamma[sl] * xhat, (xhat, inv, rows, n, sl)

    def backward(self, cache, dout):
        xhat, inv, rows, n, sl = cache
        if not rows.all():
            dout = dout * rows[:, None]
        dgamma = (dout * xhat).sum(axis=0)
        dxhat = dout * self.gamma[sl]
        if n == 0:
            return dxhat * inv, dgamma
        du = (inv / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        if not rows.all():
            du[~rows] = 0.0
        return du, dgamma

    def arrays(self):
        return {"gamma": self.gamma}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def batchnorm_forward(bn, preact, valid_mask=None):
    """Normalize a (batch x features) matrix; see :class:`BatchNorm`."""
    out, _ = bn.forward(np.asarray(preact), valid_mask)
    return out


@dataclass
class SequenceBatch:
    """Padded minibatch. ``frames`` (B, T, F), ``labels`` and ``mask`` (B, T)."""

    frames: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray

    def __post_init__(self):
        B, T = self.mask.shape
        if self.frames.shape[:2] != (B, T) or self.labels.shape != (B, T):
            raise DimensionError(
                f"frames {self.frames.shape}, labels {self.labels.shape}, mask {self.mask.shape}")
        expected = np.arange(T)[None, :] < np.asarray(self.lengths)[:, None]
        if not np.array_equal(expected, self.mask.astype(bool)):
            raise ValueError("mask does not match lengths")

    @classmethod
    def from_sequences(cls, seqs, feature_dim=None, dtype=DEFAULT_DTYPE):
        """Pad a list of ``(frames, labels)`` pairs to the longest one."""
        lengths = np.array([len(lab) for _, lab in seqs], dtype=np.int64)
        B = len(seqs)
        T = int(lengths.max()) if B else 0
        if feature_dim is None:
            feature_dim = np.asarray(seqs[0][0]).shape[1]
        frames = np.zeros((B, T, feature_dim), dtype=dtype)
        labels = np.full((B, T), IGNORE_LABEL, dtype=np.int64)
        for i, (x, y) in enumerate(seqs):
            L = lengths[i]
            frames[i, :L] = x
            labels[i, :L] = y
        mask = (np.arange(T)[None, :] < lengths[:, None])
        return cls(frames, labels, mask, lengths)

    @property
    def batch_size(self):
        return self.mask.shape[0]

    @property
    def max_len(self):
        return self.mask.shape[1]


def reverse_index(lengths, T):
    """Time index that reverses each row within its own length (padding stays put)."""
    t = np.arange(T)[None, :]
    L = np.asarray(lengths)[:, None]
    return np.where(t < L, L - 1 - t, t)


def _reverse(x, rev):
    return np.take_along_axis(x, rev.reshape(rev.shape + (1,) * (x.ndim - 2)), axis=1)


class BiLayer:
    """One bidirectional recurrent layer: a forward and a time-reversed cell."""

    def __init__(self, kind, input_dim, hidden_dim, rng=None, bn="feedforward",
                 keep_prob=1.0, dtype=DEFAULT_DTYPE, orth_gain=1.0, bn_eps=1e-5,
                 bn_momentum=0.1, fwd=None, bwd=None):
        if bn not in BN_VARIANTS:
            raise ValueError(f"unknown batch norm variant {bn!r}")
        self.kind = CellKind.parse(kind)
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.bn_variant = bn
        self.keep_prob = keep_prob
        if fwd is None:
            fwd = CellParams.init(self.kind, input_dim, hidden_dim, rng, bias=bn is None,
                                  orth_gain=orth_gain, dtype=dtype)
        if bwd is None:
            bwd = CellParams.init(self.kind, input_dim, hidden_dim, rng, bias=bn is None,
                                  orth_gain=orth_gain, dtype=dtype)
        self.cells = {"fwd": fwd, "bwd": bwd}
        G = len(GATES[self.kind])
        self.bns = {}
        self.rbns = {}
        if bn is not None:
            for d in self.cells:
                norm = BatchNorm(G * hidden_dim, eps=bn_eps, momentum=bn_momentum, dtype=dtype)
                if self.kind is CellKind.LSTM:
                    norm.beta[gate_slice(self.kind, "f", hidden_dim)] = LSTM_FORGET_BIAS
                self.bns[d] = norm
                if bn == "recurrent":
                    self.rbns[d] = RecurrentBatchNorm(G * hidden_dim, eps=bn_eps,
                                                      momentum=bn_momentum, dtype=dtype)

    @property
    def output_dim(self):
        return 2 * self.hidden_dim

    def params(self, prefix=""):
        out = {}
        for d, p in self.cells.items():
            for k, v in p.arrays().items():
                out[f"{prefix}{d}.{k}"] = v
            if d in self.bns:
                for k, v in self.bns[d].arrays().items():
                    out[f"{prefix}{d}.bn.{k}"] = v
            if d in self.rbns:
                for k, v in self.rbns[d].arrays().items():
                    out[f"{prefix}{d}.rbn.{k}"] = v
        return out

    def buffers(self, prefix=""):
        out = {}
        for d in self.cells:
            if d in self.bns:
                for k, v in self.bns[d].buffers().items():
                    out[f"{prefix}{d}.bn.{k}"] = v
            if d in self.rbns:
                for k, v in self.rbns[d].buffers().items():
                    out[f"{prefix}{d}.rbn.{k}"] = v
        return out

    def set_buffer(self, name, value):
        d, which, key = name.split(".")
        holder = self.bns[d] if which == "bn" else self.rbns[d]
        if which == "rbn":
            setattr(holder, key, np.array(value))
        else:
            getattr(holder, key)[...] = value

    def set_mode(self, mode, update_stats=True):
        for norm in list(self.bns.values()) + list(self.rbns.values()):
            norm.mode = mode
            norm.update_stats = update_stats

    def draw_masks(self, batch_size, rng, train):
        dtype = self.cells["fwd"].W.dtype
        if not train or self.keep_prob >= 1.0 or rng is None:
            one = np.ones((batch_size, self.hidden_dim), dtype=dtype)
            return {"fwd": one, "bwd": one}
        return {d: bernoulli_mask(batch_size, self.hidden_dim, self.keep_prob, rng, dtype)
                for d in ("fwd", "bwd")}

    def forward(self, x, mask, rev, masks, clamp_reset=False):
        """``x`` (B, T, D) with padding rows zeroed; returns (B, T, 2H) and a cache."""
        B, T, D = x.shape
        if D != self.input_dim:
            raise DimensionError(f"layer expects input dim {self.input_dim}, got {D}")
        H = self.hidden_dim
        flat_valid = mask.reshape(-1)
        valid_tm = mask.T
        outs = []
        cache = {}
        for d, p in self.cells.items():
            xd = x if d == "fwd" else _reverse(x, rev)
            flat = xd.reshape(B * T, D)
            a = flat @ p.W.T
            bn_cache = None
            if d in self.bns:
                a, bn_cache = self.bns[d].forward(a, flat_valid)
            else:
                a = a + p.b
            a_tm = np.ascontiguousarray(a.reshape(B, T, -1).transpose(1, 0, 2))
            hs, scache = sequence_forward(p, a_tm, masks[d], valid_tm, self.rbns.get(d),
                                          clamp_reset=clamp_reset)
            od = hs.transpose(1, 0, 2)
            if d == "bwd":
                od = _reverse(od, rev)
            outs.append(od)
            cache[d] = (flat, bn_cache, scache)
        out = np.concatenate(outs, axis=2) * mask[:, :, None]
        return out, cache

    def backward(self, cache, dout, mask, rev, prefix=""):
        B, T, _ = dout.shape
        H = self.hidden_dim
        dout = dout * mask[:, :, None]
        dx = None
        grads = {}
        for i, (d, p) in enumerate(self.cells.items()):
            flat, bn_cache, scache = cache[d]
            dod = dout[:, :, i * H:(i + 1) * H]
            if d == "bwd":
                dod = _reverse(dod, rev)
            dhs = np.ascontiguousarray(dod.transpose(1, 0, 2))
            rbn = self.rbns.get(d)
            da_tm, dU, dgr = sequence_backward(p, scache, dhs, rbn)
            da = da_tm.transpose(1, 0, 2).reshape(B * T, -1)
            grads[f"{prefix}{d}.U"] = dU
            if d in self.bns:
                da, dgamma, dbeta = self.bns[d].backward(bn_cache, da)
                grads[f"{prefix}{d}.bn.gamma"] = dgamma
                grads[f"{prefix}{d}.bn.beta"] = dbeta
            else:
                grads[f"{prefix}{d}.b"] = da.sum(axis=0)
            if rbn is not None:
                grads[f"{prefix}{d}.rbn.gamma"] = dgr
            grads[f"{prefix}{d}.W"] = da.T @ flat
            dxd = (da @ p.W).reshape(B, T, -1)
            if d == "bwd":
                dxd = _reverse(dxd, rev)
            dx = dxd if dx is None else dx + dxd
        return dx * mask[:, :, None], grads

    def gate_activations(self, cache, rev):
        """Per-gate activations (B, T, H) for each direction, aligned to input time."""
        out = {}
        for d in self.cells:
            steps = cache[d][2].steps
            for g in SIGMOID_GATES[self.kind]:
                if g == "r" and steps and steps[0].values.get("clamp_reset"):
                    continue
                arr = np.stack([s.values[g] for s in steps], axis=1)
                if d == "bwd":
                    arr = _reverse(arr, rev)
                out[(d, g)] = arr
        return out


def bidirectional_forward(fwd, bwd, batch, bn=None, keep_prob=1.0, rng=None, train=True):
    """Run one bidirectional layer built from explicit cell parameters.

    ``bn`` is ``None`` or a (forward, backward) pair of :class:`BatchNorm`.
    One dropout mask per direction is drawn from ``rng`` and reused at
    every timestep. Returns the (B, T, 2H) hidden sequence.
    """
    layer = BiLayer(fwd.kind, fwd.input_dim, fwd.hidden_dim, bn=None, keep_prob=keep_prob,
                    fwd=fwd, bwd=bwd)
    if bn is not None:
        layer.bn_variant = "feedforward"
        layer.bns = {"fwd": bn[0], "bwd": bn[1]}
    layer.set_mode("train" if train else "eval")
    mask = batch.mask.astype(bool)
    rev = reverse_index(batch.lengths, batch.max_len)
    x = batch.frames * mask[:, :, None]
    out, _ = layer.forward(x, mask, rev, layer.draw_masks(batch.batch_size, rng, train))
    return out


@dataclass
class ForwardCache:
    x: np.ndarray
    mask: np.ndarray
    rev: np.ndarray
    layer_caches: list
    layer_inputs: list
    masks: list
    top: np.ndarray


class ModelStack:
    """Stacked bidirectional layers followed by a per-frame affine classifier."""

    def __init__(self, kind, input_dim, hidden_dim, num_layers, num_classes, rng,
                 bn="feedforward", keep_prob=1.0, dtype=DEFAULT_DTYPE, orth_gain=1.0,
                 bn_eps=1e-5, bn_momentum=0.1):
        self.kind = CellKind.parse(kind)
        self.config = dict(
            kind=self.kind.value, input_dim=int(input_dim), hidden_dim=int(hidden_dim),
            num_layers=int(num_layers), num_classes=int(num_classes), bn=bn,
            keep_prob=float(keep_prob), dtype=np.dtype(dtype).name,
            orth_gain=float(orth_gain), bn_eps=float(bn_eps), bn_momentum=float(bn_momentum),
        )
        self.layers = []
        d = input_dim
        for _ in range(num_layers):
            layer = BiLayer(self.kind, d, hidden_dim, rng, bn=bn, keep_prob=keep_prob,
                            dtype=dtype, orth_gain=orth_gain, bn_eps=bn_eps,
                            bn_momentum=bn_momentum)
            self.layers.append(layer)
            d = layer.output_dim
        self.out_W = glorot_init(d, num_classes, rng, dtype)
        self.out_b = np.zeros(num_classes, dtype=dtype)

    @classmethod
    def from_config(cls, config, rng):
        cfg = dict(config)
        return cls(cfg.pop("kind"), rng=rng, **cfg)

    @property
    def num_classes(self):
        return self.out_W.shape[0]

    @property
    def input_dim(self):
        return self.config["input_dim"]

    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"layer{i}."))
        out["out.W"] = self.out_W
        out["out.b"] = self.out_b
        return out

    def buffers(self):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.buffers(f"layer{i}."))
        return out

    def set_buffer(self, name, value):
        head, rest = name.split(".", 1)
        self.layers[int(head[len("layer"):])].set_buffer(rest, value)

    def cell_param_count(self):
        return sum(p.size for name, p in self.params().items()
                   if name.split(".")[-1] in ("W", "U", "b") and not name.startswith("out."))

    def set_mode(self, mode, update_stats=True):
        for layer in self.layers:
            layer.set_mode(mode, update_stats)

    def forward(self, batch, train=False, rng=None, masks=None, update_stats=True,
                clamp_reset=False):
        """Logits (B, T, C) for a :class:`SequenceBatch`, plus a backward cache.

        ``train`` selects batch statistics and dropout. Passing ``masks``
        (from a previous cache) reuses those dropout masks; with
        ``update_stats=False`` running batch-norm estimates stay fixed.
        """
        mask = batch.mask.astype(bool)
        if batch.frames.shape[2] != self.input_dim:
            raise DimensionError(
                f"model expects feature dim {self.input_dim}, got {batch.frames.shape[2]}")
        rev = reverse_index(batch.lengths, batch.max_len)
        x = batch.frames.astype(self.out_W.dtype, copy=False) * mask[:, :, None]
        self.set_mode("train" if train else "eval", update_stats)
        if masks is None:
            masks = [layer.draw_masks(batch.batch_size, rng, train) for layer in self.layers]
        caches, inputs = [], []
        h = x
        for layer, m in zip(self.layers, masks):
            inputs.append(h)
            h, c = layer.forward(h, mask, rev, m, clamp_reset=clamp_reset)
            caches.append(c)
        logits = h @ self.out_W.T + self.out_b
        return logits, ForwardCache(x, mask, rev, caches, inputs, masks, h)

    def backward(self, cache, dlogits):
        dlogits = dlogits * cache.mask[:, :, None]
        B, T, C = dlogits.shape
        top = cache.top.reshape(B * T, -1)
        dflat = dlogits.reshape(B * T, C)
        grads = {"out.W": dflat.T @ top, "out.b": dflat.sum(axis=0)}
        dh = dlogits @ self.out_W
        for i in reversed(range(len(self.layers))):
            dh, g = self.layers[i].backward(cache.layer_caches[i], dh, cache.mask, cache.rev,
                                            prefix=f"layer{i}.")
            grads.update(g)
        return grads

    def relu_pattern(self, cache):
        """Boolean activity of every ReLU unit at valid steps (for kink detection)."""
        parts = []
        for lc in cache.layer_caches:
            for _, _, scache in lc.values():
                for t, step in enumerate(scache.steps):
                    v = step.values
                    act = v.get("h") if step.kind is CellKind.RELU_RNN else (
                        v.get("cand") if step.kind is CellKind.MRELU_GRU else None)
                    if act is None:
                        continue
                    # per-length reversal keeps padding at the end, so the mask is shared
                    parts.append(((act > 0) & cache.mask[:, t, None]).ravel())
        return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)

    def gate_trace(self, cache):
        """Mean sigmoid-gate activation per (layer, gate, timestep) over valid rows.

        Means are taken over hidden units, both directions and the valid
        sequences at each timestep.
        """
        rows = []
        mask = cache.mask
        counts = mask.sum(axis=0)
        for li, layer in enumerate(self.layers):
            acts = layer.gate_activations(cache.layer_caches[li], cache.rev)
            by_gate = {}
            for (d, g), arr in acts.items():
                by_gate.setdefault(g, []).append(arr)
            for g, arrs in by_gate.items():
                stacked = np.mean([a.mean(axis=2) for a in arrs], axis=0)  # (B, T)
                sums = (stacked * mask).sum(axis=0)
                for t in range(mask.shape[1]):
                    if counts[t] > 0:
                        rows.append((t, li, g, float(sums[t] / counts[t])))
        return rows


def stack_forward(model, batch, mode="eval", rng=None):
    """Per-frame logits; ``mode`` is ``"train"`` or ``"eval"``."""
    logits, _ = model.forward(batch, train=(mode == "train"), rng=rng)
    return logits


def softmax_xent_loss(logits, labels, mask):
    """Mean cross-entropy over valid frames and its gradient wrt the logits."""
    logits = np.asarray(logits)
    if logits.shape[:2] != np.shape(labels) or np.shape(labels) != np.shape(mask):
        raise DimensionError(
            f"logits {logits.shape}, labels {np.shape(labels)}, mask {np.shape(mask)}")
    valid = np.asarray(mask, dtype=bool) & (np.asarray(labels) >= 0)
    n = int(valid.sum())
    if n == 0:
        raise EmptyBatchError("no valid frames to average the loss over")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * valid).sum() / n
    grad = np.exp(logp)
    np.put_along_axis(grad, safe[..., None],
                      np.take_along_axis(grad, safe[..., None], axis=-1) - 1.0, axis=-1)
    grad *= valid[..., None] / n
    return float(loss), grad

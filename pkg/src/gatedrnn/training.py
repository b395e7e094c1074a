"""Training recipe: Adam, LR halving, length-sorted batching, BPTT epochs, grad checks."""

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import SequenceBatch, softmax_xent_loss
from .numeric import DimensionError, Rng

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite value."""

    def __init__(self, tensor, epoch=None, step=None):
        self.tensor = tensor
        self.epoch = epoch
        self.step = step
        super().__init__(f"non-finite values in {tensor} (epoch {epoch}, step {step})")


@dataclass
class TrainConfig:
    initial_lr: float = 0.0013
    dropout: float = 0.2
    batch_size: int = 8
    epochs: int = 22
    lr_halving_threshold: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class TrainState:
    """Adam moments, step counter, LR schedule and per-epoch dev history."""

    m: dict
    v: dict
    lr: float
    step: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)
    rng_state: dict = None
    best_dev: float = float("inf")

    @classmethod
    def fresh(cls, params, lr):
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            lr=lr,
        )


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    dev_frame_err: float
    lr: float
    wall_seconds: float
    max_abs_hidden: float


def adam_update(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam step, applied to ``params`` in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, param {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def _sequences(dataset):
    return dataset.sequences if hasattr(dataset, "sequences") else list(dataset)


def sort_and_batch(dataset, batch_size, dtype=np.float64):
    """Stable ascending sort by length, then consecutive chunks of ``batch_size``."""
    seqs = _sequences(dataset)
    if not seqs:
        raise ValueError("cannot batch an empty dataset")
    feature_dim = np.asarray(seqs[0][0]).shape[1]
    order = sorted(range(len(seqs)), key=lambda i: len(seqs[i][1]))
    batches = []
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        b = SequenceBatch.from_sequences([seqs[i] for i in idx], feature_dim, dtype)
        b.indices = idx
        batches.append(b)
    return batches


def padding_waste(batches):
    return int(sum(b.mask.size - b.mask.sum() for b in batches))


def halve_lr_on_plateau(history, threshold, current_lr):
    """Halve the LR when the relative dev-error improvement drops below ``threshold``.

    ``history`` holds dev error per epoch (lower is better). With a single
    epoch there is nothing to compare against and the LR is kept.
    """
    if len(history) < 2:
        return current_lr
    prev, cur = history[-2], history[-1]
    if prev > 0:
        improvement = (prev - cur) / prev
    else:
        improvement = 0.0
    if improvement < threshold:
        return current_lr / 2.0
    return current_lr


def frame_error(model, batches):
    wrong = 0
    total = 0
    for b in batches:
        logits, _ = model.forward(b, train=False)
        valid = b.mask.astype(bool) & (b.labels >= 0)
        pred = logits.argmax(axis=-1)
        wrong += int(((pred != b.labels) & valid).sum())
        total += int(valid.sum())
    return wrong / max(total, 1)


def _first_nonfinite(named):
    for name, arr in named:
        if not np.all(np.isfinite(arr)):
            return name
    return None


def train_model(config, model, train_set, dev_set, state=None, on_epoch_end=None):
    """Run ``config.epochs`` epochs of full-BPTT Adam training.

    Batches are formed once by length and visited shortest first. Dropout
    masks come from an RNG seeded by ``config.seed`` (or the state's saved
    RNG when resuming), so a run is a pure function of its inputs.
    ``on_epoch_end(metrics, model, state)`` is called after every epoch.
    Returns ``(model, metrics)``.
    """
    if state is None:
        state = TrainState.fresh(model.params(), config.initial_lr)
    rng = Rng(config.seed)
    if state.rng_state is not None:
        rng.set_state(state.rng_state)
    keep = 1.0 - config.dropout
    for layer in model.layers:
        layer.keep_prob = keep
    dtype = model.out_W.dtype
    train_batches = sort_and_batch(train_set, config.batch_size, dtype)
    dev_batches = sort_and_batch(dev_set, config.batch_size, dtype)
    metrics = []
    while state.epoch < config.epochs:
        epoch = state.epoch + 1
        t0 = time.perf_counter()
        loss_sum = 0.0
        frames = 0
        max_hidden = 0.0
        params = model.params()
        for step, batch in enumerate(train_batches):
            logits, cache = model.forward(batch, train=True, rng=rng)
            hidden = [(f"layer{i}.output", h) for i, h in
                      enumerate(cache.layer_inputs[1:] + [cache.top])]
            bad = _first_nonfinite(hidden + [("logits", logits)])
            if bad:
                raise DivergenceError(bad, epoch, step)
            max_hidden = max(max_hidden, max(float(np.abs(h).max()) for _, h in hidden)
                             if hidden else 0.0)
            loss, dlogits = softmax_xent_loss(logits, batch.labels, batch.mask)
            if not np.isfinite(loss):
                raise DivergenceError("loss", epoch, step)
            grads = model.backward(cache, dlogits)
            bad = _first_nonfinite((f"grad[{k}]", g) for k, g in grads.items())
            if bad:
                raise DivergenceError(bad, epoch, step)
            adam_update(params, grads, state, state.lr, config.beta1, config.beta2,
                        config.adam_eps)
            bad = _first_nonfinite(list(params.items())
                                   + [(f"adam_m[{k}]", a) for k, a in state.m.items()]
                                   + [(f"adam_v[{k}]", a) for k, a in state.v.items()])
            if bad:
                raise DivergenceError(bad, epoch, step)
            n = int((batch.mask.astype(bool) & (batch.labels >= 0)).sum())
            loss_sum += loss * n
            frames += n
        dev_err = frame_error(model, dev_batches)
        used_lr = state.lr
        state.history.append(dev_err)
        state.lr = halve_lr_on_plateau(state.history, config.lr_halving_threshold, state.lr)
        state.epoch = epoch
        state.rng_state = rng.get_state()
        em = EpochMetrics(epoch, loss_sum / max(frames, 1), dev_err, used_lr,
                          time.perf_counter() - t0, max_hidden)
        metrics.append(em)
        log.info("epoch %d loss %.4f dev_err %.4f lr %.6g", epoch, em.train_loss, dev_err,
                 used_lr)
        if dev_err < state.best_dev:
            state.best_dev = dev_err
        if on_epoch_end is not None:
            on_epoch_end(em, model, state)
    return model, metrics


@dataclass
class GradCheckReport:
    errors: dict
    epsilon: float
    threshold: float = 1e-5
    skipped: dict = field(default_factory=dict)
    stencil: int = 2

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self):
        return self.max_error < self.threshold

    def failures(self):
        return {k: e for k, e in self.errors.items() if not e < self.threshold}

    def as_dict(self):
        d = asdict(self)
        d.update(max_error=self.max_error, passed=self.passed)
        return d


# Gradients smaller than this are compared in absolute terms: central
# differences carry ~1e-11 of rounding noise at eps=1e-5.
REL_ERR_FLOOR = 1e-5


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_ERR_FLOOR)


def grad_check(model, batch, epsilon=1e-5, num_coords=20, rng=None, threshold=1e-5,
               stencil=2, clamp_reset=False):
    """Compare backprop gradients with central differences.

    Dropout masks are drawn once and frozen; batch norm runs on batch
    statistics, which are part of the differentiated function, and its
    running estimates are left untouched. ``num_coords`` coordinates of
    every parameter tensor are checked (all of them if the tensor is
    smaller). A coordinate whose perturbation flips any ReLU unit sits on a
    kink where finite differences are meaningless; it is skipped, counted
    in ``skipped`` and replaced by another one.

    ``stencil=2`` is the usual ``(f(x+e) - f(x-e)) / 2e``; ``stencil=4``
    uses the fourth-order central formula on the same step, for strongly
    curved losses.
    """
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    rng = rng or Rng(0)
    logits, cache = model.forward(batch, train=True, rng=rng, update_stats=False,
                                  clamp_reset=clamp_reset)
    masks = cache.masks
    base_pattern = model.relu_pattern(cache)
    _, dlogits = softmax_xent_loss(logits, batch.labels, batch.mask)
    grads = model.backward(cache, dlogits)

    def loss_at():
        lg, c = model.forward(batch, train=True, masks=masks, update_stats=False,
                              clamp_reset=clamp_reset)
        return softmax_xent_loss(lg, batch.labels, batch.mask)[0], model.relu_pattern(c)

    offsets = (1, -1) if stencil == 2 else (2, 1, -1, -2)
    weights = {1: 0.5, -1: -0.5} if stencil == 2 else {2: -1 / 12, 1: 8 / 12, -1: -8 / 12,
                                                       -2: 1 / 12}
    errors, skipped = {}, {}
    for name, p in model.params().items():
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        worst = 0.0
        done = 0
        skipped[name] = 0
        for i in rng.permutation(flat.size):
            if done >= num_coords:
                break
            orig = flat[i]
            numeric = 0.0
            kink = False
            for k in offsets:
                flat[i] = orig + k * epsilon
                val, pattern = loss_at()
                kink = kink or not np.array_equal(pattern, base_pattern)
                numeric += weights[k] * val
            flat[i] = orig
            if kink:
                skipped[name] += 1
                continue
            worst = max(worst, relative_error(g[i], numeric / epsilon))
            done += 1
        errors[name] = worst
    return GradCheckReport(errors, epsilon, threshold, skipped, stencil)


def fit_logistic_baseline(train_set, dev_set, l2=1e-4):
    """Frame-independent softmax regression; returns its dev frame error.

    Fitted to convergence with L-BFGS on all training frames.
    """
    from scipy.optimize import minimize

    def stack(ds):
        xs = np.concatenate([np.asarray(x) for x, _ in _sequences(ds)])
        ys = np.concatenate([np.asarray(y) for _, y in _sequences(ds)])
        keep = ys >= 0
        return xs[keep], ys[keep]

    X, y = stack(train_set)
    C = int(getattr(train_set, "num_classes", y.max() + 1))
    mu, sd = X.mean(axis=0), X.std(axis=0) + 1e-12
    Xn = np.hstack([(X - mu) / sd, np.ones((len(X), 1))])
    Y = np.eye(C)[y]
    D = Xn.shape[1]

    def objective(w):
        W = w.reshape(D, C)
        z = Xn @ W
        z -= z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -(Y * logp).sum() / len(Xn) + 0.5 * l2 * (W[:-1] ** 2).sum()
        grad = Xn.T @ (np.exp(logp) - Y) / len(Xn)
        grad[:-1] += l2 * W[:-1]
        return loss, grad.ravel()

    res = minimize(objective, np.zeros(D * C), jac=True, method="L-BFGS-B",
                   options={"maxiter": 1000})
    W = res.x.reshape(D, C)
    Xd, yd = stack(dev_set)
    pred = (np.hstack([(Xd - mu) / sd, np.ones((len(Xd), 1))]) @ W).argmax(axis=1)
    return float((pred != yd).mean())

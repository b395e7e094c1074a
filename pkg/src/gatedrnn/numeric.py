"""Dense linear algebra helpers, activations, seeded randomness and initializers.

Matrices are plain ``numpy.ndarray`` objects (float64 unless a caller asks
otherwise). The helpers here add the shape checks and determinism
guarantees the rest of the package relies on.
"""

import numpy as np


class DimensionError(ValueError):
    """Raised when array shapes are incompatible."""


class ParameterError(ValueError):
    """Raised when a scalar argument is outside its valid range."""


DEFAULT_DTYPE = np.float64


class Rng:
    """Seeded random stream backed by numpy's PCG64 bit generator.

    The same seed yields the same draws on every platform. The full
    generator state can be exported with :meth:`get_state` and restored
    with :meth:`set_state` (used by checkpoints).
    """

    def __init__(self, seed=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low, high, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size, scale=1.0):
        return self._gen.normal(0.0, scale, size)

    def random(self, size):
        return self._gen.random(size)

    def integers(self, low, high, size=None):
        """Integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def spawn(self, key):
        """Derive an independent child stream from this seed and an integer key."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return Rng(int(ss.generate_state(1, np.uint64)[0]))

    def get_state(self):
        return {"seed": self.seed, "bit_generator": self._gen.bit_generator.state}

    def set_state(self, state):
        self.seed = int(state["seed"])
        self._gen.bit_generator.state = state["bit_generator"]


def as_matrix(x, dtype=None):
    a = np.asarray(x, dtype=dtype or DEFAULT_DTYPE)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b):
    """Matrix product with an explicit shape check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def sigmoid(x):
    # branch form: exp is only ever evaluated on non-positive arguments
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(
        np.result_type(x, np.float32), copy=False)


def relu(x):
    return np.maximum(x, 0.0)


def tanh(x):
    return np.tanh(x)


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def activation(kind, x):
    """Apply an elementwise nonlinearity: ``sigmoid``, ``tanh`` or ``relu``."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ParameterError(f"unknown activation {kind!r}") from None
    x = np.asarray(x)
    return fn(x.astype(np.result_type(x, np.float32), copy=False))


def orthogonal_init(rows, cols, rng, gain=1.0, dtype=DEFAULT_DTYPE):
    """Random (semi-)orthogonal matrix of shape (rows, cols).

    QR of a square Gaussian matrix, with the signs of Q's columns flipped so
    that R has a positive diagonal. The leading block is returned, so the
    smaller-side Gram matrix is the identity (times ``gain**2``).
    """
    if rows < 1 or cols < 1:
        raise ParameterError("orthogonal_init needs rows, cols >= 1")
    n = max(rows, cols)
    a = rng.normal((n, n))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
    return (gain * q[:rows, :cols]).astype(dtype)


def glorot_init(fan_in, fan_out, rng, dtype=DEFAULT_DTYPE):
    """Uniform Glorot init, shape (fan_out, fan_in), so that ``y = x @ W.T``."""
    if fan_in < 1 or fan_out < 1:
        raise ParameterError("glorot_init needs fan_in, fan_out >= 1")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_out, fan_in)).astype(dtype)


def bernoulli_mask(rows, cols, keep_prob, rng, dtype=DEFAULT_DTYPE):
    """Inverted-dropout mask: entries are 0 or 1/keep_prob, mean 1."""
    if not 0.0 < keep_prob <= 1.0:
        raise ParameterError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if keep_prob == 1.0:
        return np.ones((rows, cols), dtype=dtype)
    keep = rng.random((rows, cols)) < keep_prob
    return keep.astype(dtype) / np.dtype(dtype).type(keep_prob)


def all_finite(*arrays):
    return all(np.all(np.isfinite(a)) for a in arrays)

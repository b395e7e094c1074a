"""Synthetic sequence tasks plus the dataset and checkpoint file formats.

Dataset file (version 1)::

    GRNNDATA 1 <feature_dim> <num_classes> <count> <has_targets>\\n
    then per sequence:
      uint32   length L
      float64  L * feature_dim frame values, row-major
      int32    L labels (-1 marks an unscored frame)
      float64  regression target (only when has_targets is 1)

All binary fields are little-endian, so reals round-trip bit for bit.

Checkpoint file (version 1)::

    8 bytes  b"GRNNCKPT"
    uint32   format version
    uint64   header length N
    N bytes  UTF-8 JSON header (model config, train state, tensor table)
    tensor blob; each entry in the table gives name, group, dtype, shape,
    offset and byte length
"""

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .layers import IGNORE_LABEL, ModelStack
from .numeric import Rng

DATASET_MAGIC = "GRNNDATA"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"GRNNCKPT"
CHECKPOINT_VERSION = 1


class DatasetParseError(ValueError):
    """Malformed dataset file. ``offset`` is the byte position of the problem."""

    def __init__(self, msg, offset=None, line=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{msg} ({', '.join(where)})" if where else msg)
        self.offset = offset
        self.line = line


class DatasetValidationError(ValueError):
    """Dataset content violates its declared dimensions."""


class CheckpointVersionError(ValueError):
    """Checkpoint magic or version does not match this reader."""


@dataclass
class Dataset:
    feature_dim: int
    num_classes: int
    sequences: list
    targets: list = None
    # generator side information; not serialized and ignored by ==
    aux: dict = field(default_factory=dict, compare=False, repr=False)

    def __len__(self):
        return len(self.sequences)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        if (self.feature_dim, self.num_classes, len(self)) != (
                other.feature_dim, other.num_classes, len(other)):
            return False
        if (self.targets is None) != (other.targets is None):
            return False
        if self.targets is not None and not np.array_equal(
                np.asarray(self.targets, dtype=np.float64),
                np.asarray(other.targets, dtype=np.float64)):
            return False
        for (xa, ya), (xb, yb) in zip(self.sequences, other.sequences):
            if not (np.array_equal(xa, xb) and np.array_equal(ya, yb)):
                return False
        return True

    def validate(self):
        for i, (x, y) in enumerate(self.sequences):
            x = np.asarray(x)
            y = np.asarray(y)
            if len(y) == 0:
                raise DatasetValidationError(f"sequence {i} is empty")
            if x.ndim != 2 or x.shape != (len(y), self.feature_dim):
                raise DatasetValidationError(
                    f"sequence {i}: frames shape {x.shape}, expected ({len(y)}, {self.feature_dim})")
            bad = (y != IGNORE_LABEL) & ((y < 0) | (y >= self.num_classes))
            if bad.any():
                raise DatasetValidationError(
                    f"sequence {i}: label {int(y[bad][0])} outside [0, {self.num_classes})")
        if self.targets is not None and len(self.targets) != len(self.sequences):
            raise DatasetValidationError("targets count does not match sequence count")
        return self

    def split(self, n_first):
        """Two datasets: the first ``n_first`` sequences and the rest."""
        def part(sl):
            t = None if self.targets is None else list(self.targets[sl])
            return Dataset(self.feature_dim, self.num_classes, self.sequences[sl], t)
        return part(slice(0, n_first)), part(slice(n_first, None))


# --- generators ------------------------------------------------------------

def gen_adding_problem(n, T, rng, num_bins=10):
    """The adding problem, binned into ``num_bins`` classes.

    Channel 0 holds U(0, 1) values, channel 1 marks two positions (one in
    each half). The regression target is the sum of the two marked values;
    ``targets`` keeps it exactly and the last frame of each sequence carries
    its bin over [0, 2) as label. Earlier frames are unscored.
    """
    if T < 2:
        raise ValueError("adding problem needs T >= 2")
    half = T // 2
    seqs, targets = [], []
    for _ in range(n):
        vals = rng.uniform(0.0, 1.0, T)
        marks = np.zeros(T)
        i = int(rng.integers(0, half))
        j = int(rng.integers(half, T))
        marks[i] = marks[j] = 1.0
        target = float(vals[i] + vals[j])
        labels = np.full(T, IGNORE_LABEL, dtype=np.int64)
        labels[-1] = adding_bin(target, num_bins)
        seqs.append((np.stack([vals, marks], axis=1), labels))
        targets.append(target)
    return Dataset(2, num_bins, seqs, targets)


def adding_bin(target, num_bins):
    return min(int(target / 2.0 * num_bins), num_bins - 1)


def gen_framewise_task(num_seq, T_range, feature_dim, num_classes, segment_len_range,
                       noise_sigma, rng, transition_len=2):
    """Slowly varying per-frame classification task.

    Each class has a Gaussian prototype vector. A sequence is a run of
    segments; each segment picks a class different from the previous one
    and emits its prototype, with the first ``transition_len`` frames
    linearly blended from the previous prototype. Gaussian noise of
    standard deviation ``noise_sigma`` is added to every frame. Labels are
    the active segment's class.

    ``aux["prototypes"]`` and ``aux["transition"]`` (per-sequence boolean
    arrays marking blended frames) are attached for analysis.
    """
    lo_seg, hi_seg = segment_len_range
    if lo_seg < 2 or hi_seg < lo_seg:
        raise ValueError("segment lengths must be >= 2")
    lo_t, hi_t = T_range
    if lo_t < 1 or hi_t < lo_t:
        raise ValueError("bad T_range")
    if num_classes < 2:
        raise ValueError("need at least two classes")
    protos = rng.normal((num_classes, feature_dim))
    seqs, transitions = [], []
    for _ in range(num_seq):
        T = int(rng.integers(lo_t, hi_t + 1))
        frames = np.empty((T, feature_dim))
        labels = np.empty(T, dtype=np.int64)
        trans = np.zeros(T, dtype=bool)
        prev = None
        t = 0
        while t < T:
            L = int(rng.integers(lo_seg, hi_seg + 1))
            if prev is None:
                cls = int(rng.integers(0, num_classes))
            else:
                cls = int(rng.integers(0, num_classes - 1))
                cls += cls >= prev
            end = min(T, t + L)
            frames[t:end] = protos[cls]
            labels[t:end] = cls
            if prev is not None:
                k = min(transition_len, L - 1, end - t)
                for s in range(k):
                    w = (s + 1) / (k + 1)
                    frames[t + s] = (1 - w) * protos[prev] + w * protos[cls]
                    trans[t + s] = True
            prev = cls
            t = end
        frames += rng.normal((T, feature_dim), scale=noise_sigma) if noise_sigma > 0 else 0.0
        seqs.append((frames, labels))
        transitions.append(trans)
    ds = Dataset(feature_dim, num_classes, seqs)
    ds.aux = {"prototypes": protos, "transition": transitions}
    return ds


# --- dataset I/O -------------------------------------------------------------

def dataset_to_bytes(ds):
    ds.validate()
    has_t = int(ds.targets is not None)
    buf = io.BytesIO()
    header = (f"{DATASET_MAGIC} {DATASET_VERSION} {ds.feature_dim} {ds.num_classes} "
              f"{len(ds)} {has_t}\n")
    buf.write(header.encode("ascii"))
    for i, (x, y) in enumerate(ds.sequences):
        buf.write(struct.pack("<I", len(y)))
        buf.write(np.ascontiguousarray(x, dtype="<f8").tobytes())
        buf.write(np.asarray(y, dtype="<i4").tobytes())
        if has_t:
            buf.write(struct.pack("<d", float(ds.targets[i])))
    return buf.getvalue()


def save_dataset(ds, path):
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(ds))


def dataset_from_bytes(raw):
    nl = raw.find(b"\n")
    if nl < 0:
        raise DatasetParseError("missing header line", offset=0, line=1)
    try:
        parts = raw[:nl].decode("ascii").split()
    except UnicodeDecodeError:
        raise DatasetParseError("header is not ASCII", offset=0, line=1) from None
    if len(parts) != 6 or parts[0] != DATASET_MAGIC:
        raise DatasetParseError("bad header, expected "
                                f"'{DATASET_MAGIC} <version> <F> <C> <N> <has_targets>'",
                                offset=0, line=1)
    try:
        version, F, C, N, has_t = (int(p) for p in parts[1:])
    except ValueError:
        raise DatasetParseError("non-integer header field", offset=0, line=1) from None
    if version != DATASET_VERSION:
        raise DatasetParseError(f"unsupported dataset version {version}", offset=0, line=1)
    if F < 1 or C < 1 or N < 0 or has_t not in (0, 1):
        raise DatasetValidationError(f"invalid header values F={F} C={C} N={N}")
    pos = nl + 1
    seqs, targets = [], [] if has_t else None

    def take(nbytes, what, idx):
        nonlocal pos
        if pos + nbytes > len(raw):
            raise DatasetParseError(f"truncated {what} in sequence {idx}", offset=pos)
        chunk = raw[pos:pos + nbytes]
        pos += nbytes
        return chunk

    for i in range(N):
        (L,) = struct.unpack("<I", take(4, "length", i))
        if L == 0:
            raise DatasetValidationError(f"sequence {i} is empty")
        x = np.frombuffer(take(8 * L * F, "frames", i), dtype="<f8").reshape(L, F)
        y = np.frombuffer(take(4 * L, "labels", i), dtype="<i4").astype(np.int64)
        seqs.append((x.astype(np.float64), y))
        if has_t:
            targets.append(struct.unpack("<d", take(8, "target", i))[0])
    if pos != len(raw):
        raise DatasetParseError(f"{len(raw) - pos} trailing bytes", offset=pos)
    return Dataset(F, C, seqs, targets).validate()


def load_dataset(path):
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(model, train_state, path, extra=None):
    """Write model parameters, batch-norm buffers and (optionally) optimizer state."""
    tensors = []
    blobs = []
    offset = 0

    def add(group, name, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr)
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        tensors.append(dict(name=name, group=group, dtype=arr.dtype.name,
                            shape=list(arr.shape), offset=offset, nbytes=len(data)))
        blobs.append(data)
        offset += len(data)

    for name, arr in model.params().items():
        add("param", name, arr)
    for name, arr in model.buffers().items():
        add("buffer", name, arr)
    state = None
    if train_state is not None:
        for name, arr in train_state.m.items():
            add("adam_m", name, arr)
        for name, arr in train_state.v.items():
            add("adam_v", name, arr)
        state = dict(step=train_state.step, epoch=train_state.epoch, lr=train_state.lr,
                     history=list(train_state.history), best_dev=train_state.best_dev,
                     rng_state=train_state.rng_state)
    header = json.dumps(dict(model_config=model.config, train_state=state, tensors=tensors,
                             extra=extra or {}), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    """Returns ``(model, train_state_or_None, extra)``."""
    from .training import TrainState

    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint (bad magic {raw[:8]!r})")
    if len(raw) < 20:
        raise CheckpointVersionError(f"{path}: truncated checkpoint header")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {version}, this reader handles {CHECKPOINT_VERSION}")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    base = 20 + hlen
    groups = {"param": {}, "buffer": {}, "adam_m": {}, "adam_v": {}}
    for t in header["tensors"]:
        dt = np.dtype(t["dtype"]).newbyteorder("<")
        start = base + t["offset"]
        arr = np.frombuffer(raw[start:start + t["nbytes"]], dtype=dt).reshape(t["shape"])
        groups[t["group"]][t["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    model = ModelStack.from_config(header["model_config"], Rng(0))
    params = model.params()
    if set(params) != set(groups["param"]):
        raise ValueError(f"{path}: parameter set does not match model config")
    for name, arr in groups["param"].items():
        params[name][...] = arr
    for name, arr in groups["buffer"].items():
        model.set_buffer(name, arr)
    state = None
    st = header.get("train_state")
    if st is not None:
        state = TrainState(m=dict(groups["adam_m"]), v=dict(groups["adam_v"]), lr=st["lr"],
                           step=st["step"], epoch=st["epoch"], history=list(st["history"]),
                           rng_state=st["rng_state"], best_dev=st["best_dev"])
    return model, state, header.get("extra", {})

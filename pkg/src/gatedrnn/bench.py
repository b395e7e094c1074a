"""Per-step throughput benchmark and gate-activation traces."""

import math
import time

import numpy as np

from .cells import GATES, CellKind, param_count
from .layers import BiLayer, SequenceBatch, reverse_index

BENCH_SCHEMA_VERSION = 1

_ROW_PROPS = {
    "arch": {"type": "string"},
    "label": {"type": "string"},
    "hidden_dim": {"type": "integer", "minimum": 1},
    "param_count": {"type": "integer", "minimum": 1},
    "forward_us_median": {"type": "number", "exclusiveMinimum": 0},
    "forward_us_iqr": {"type": "number", "minimum": 0},
    "forward_us_mean": {"type": "number", "exclusiveMinimum": 0},
    "forward_us_std": {"type": "number", "minimum": 0},
    "fwd_bwd_us_median": {"type": "number", "exclusiveMinimum": 0},
    "fwd_bwd_us_iqr": {"type": "number", "minimum": 0},
    "fwd_bwd_us_mean": {"type": "number", "exclusiveMinimum": 0},
    "fwd_bwd_us_std": {"type": "number", "minimum": 0},
    "fwd_bwd_us_per_timestep": {"type": "number", "exclusiveMinimum": 0},
    "epoch_seconds": {"type": "number", "exclusiveMinimum": 0},
    "reduction_vs_gru": {"type": ["number", "null"]},
}

# JSON schema of the report written by ``gatedrnn bench``
BENCH_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "workload", "notes", "tables"],
    "properties": {
        "schema_version": {"const": BENCH_SCHEMA_VERSION},
        "workload": {
            "type": "object",
            "required": ["input_dim", "hidden_dim", "batch_size", "seq_len", "warmup",
                         "iters", "dtype", "bn", "steps_per_epoch", "blas_threads"],
        },
        "notes": {"type": "array", "items": {"type": "string"}},
        "tables": {
            "type": "object",
            "required": ["matched_hidden", "matched_params"],
            "additionalProperties": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": list(_ROW_PROPS),
                    "properties": _ROW_PROPS,
                    "additionalProperties": False,
                },
            },
        },
    },
}

BENCH_ARCHS = (CellKind.RELU_RNN, CellKind.LSTM, CellKind.GRU, CellKind.MGRU,
               CellKind.MRELU_GRU)


def matched_hidden_dim(kind, input_dim, target_params):
    """Hidden size whose cell parameter count is closest to ``target_params``."""
    G = len(GATES[CellKind.parse(kind)])
    # G * (h^2 + (d + 1) h) = target
    b = input_dim + 1
    h = (-b + math.sqrt(b * b + 4 * target_params / G)) / 2
    best = max(1, int(round(h)))
    cands = [c for c in (best - 1, best, best + 1) if c >= 1]
    return min(cands, key=lambda c: abs(param_count(kind, input_dim, c) - target_params))


class _LayerBench:
    def __init__(self, kind, input_dim, hidden_dim, batch_size, seq_len, rng, dtype, bn):
        self.kind = CellKind.parse(kind)
        self.hidden_dim = hidden_dim
        self.layer = BiLayer(self.kind, input_dim, hidden_dim, rng, bn=bn, dtype=dtype)
        self.layer.set_mode("train")
        lengths = np.full(batch_size, seq_len)
        self.batch = SequenceBatch(
            rng.normal((batch_size, seq_len, input_dim)).astype(dtype),
            np.zeros((batch_size, seq_len), dtype=np.int64),
            np.ones((batch_size, seq_len), dtype=bool), lengths)
        self.rev = reverse_index(lengths, seq_len)
        self.masks = self.layer.draw_masks(batch_size, None, False)
        self.dout = rng.normal((batch_size, seq_len, 2 * hidden_dim)).astype(dtype)

    def forward(self):
        return self.layer.forward(self.batch.frames, self.batch.mask, self.rev, self.masks)

    def fwd_bwd(self):
        _, cache = self.forward()
        self.layer.backward(cache, self.dout, self.batch.mask, self.rev)


def _stats(samples_s):
    us = np.asarray(samples_s) * 1e6
    q1, med, q3 = np.percentile(us, [25, 50, 75])
    return dict(median=float(med), iqr=float(q3 - q1), mean=float(us.mean()),
                std=float(us.std(ddof=1)) if len(us) > 1 else 0.0)


def _measure(benches, warmup, iters):
    """Interleaved timing: every round times each architecture once, in turn."""
    for _ in range(warmup):
        for b in benches:
            b.fwd_bwd()
    fwd = [[] for _ in benches]
    both = [[] for _ in benches]
    clock = time.perf_counter
    for _ in range(iters):
        for i, b in enumerate(benches):
            t0 = clock()
            b.forward()
            fwd[i].append(clock() - t0)
        for i, b in enumerate(benches):
            t0 = clock()
            b.fwd_bwd()
            both[i].append(clock() - t0)
    return fwd, both


def run_benchmark(input_dim=40, hidden_dim=465, batch_size=8, seq_len=20, warmup=10,
                  iters=100, dtype=np.float64, bn="feedforward", steps_per_epoch=462,
                  archs=BENCH_ARCHS, rng=None, blas_threads=1):
    """Time one bidirectional layer per architecture, forward and forward+backward.

    Two tables: all architectures at ``hidden_dim``, and each architecture
    at the hidden size matching the GRU's parameter count at ``hidden_dim``.
    """
    from .numeric import Rng

    rng = rng or Rng(0)
    archs = [CellKind.parse(a) for a in archs]
    gru_params = param_count(CellKind.GRU, input_dim, hidden_dim)
    sizes = {
        "matched_hidden": {k: hidden_dim for k in archs},
        "matched_params": {k: matched_hidden_dim(k, input_dim, gru_params) for k in archs},
    }
    tables = {}
    for table, dims in sizes.items():
        benches = [_LayerBench(k, input_dim, dims[k], batch_size, seq_len, rng, dtype, bn)
                   for k in archs]
        fwd, both = _measure(benches, warmup, iters)
        rows = []
        for k, f, fb in zip(archs, fwd, both):
            sf, sb = _stats(f), _stats(fb)
            rows.append({
                "arch": k.value,
                "label": k.label,
                "hidden_dim": int(dims[k]),
                "param_count": int(param_count(k, input_dim, dims[k])),
                "forward_us_median": sf["median"],
                "forward_us_iqr": sf["iqr"],
                "forward_us_mean": sf["mean"],
                "forward_us_std": sf["std"],
                "fwd_bwd_us_median": sb["median"],
                "fwd_bwd_us_iqr": sb["iqr"],
                "fwd_bwd_us_mean": sb["mean"],
                "fwd_bwd_us_std": sb["std"],
                "fwd_bwd_us_per_timestep": sb["median"] / seq_len,
                "epoch_seconds": sb["median"] * 1e-6 * steps_per_epoch,
                "reduction_vs_gru": None,
            })
        gru = next((r for r in rows if r["arch"] == CellKind.GRU.value), None)
        if gru is not None:
            for r in rows:
                r["reduction_vs_gru"] = 1.0 - r["fwd_bwd_us_median"] / gru["fwd_bwd_us_median"]
        tables[table] = rows
    return {
        "schema_version": BENCH_SCHEMA_VERSION,
        "workload": dict(input_dim=input_dim, hidden_dim=hidden_dim, batch_size=batch_size,
                         seq_len=seq_len, warmup=warmup, iters=iters,
                         dtype=np.dtype(dtype).name, bn=bn or "none",
                         steps_per_epoch=steps_per_epoch, blas_threads=blas_threads),
        "notes": [
            "one step = forward (and backward) of one bidirectional layer over the batch",
            "timings are CPU wall clock, interleaved across architectures each round",
            f"the same batch-norm policy ({bn or 'none'}) is applied to every architecture",
            "epoch_seconds = median forward+backward step time x steps_per_epoch",
            "matched_params sizes each architecture to the GRU parameter count at hidden_dim",
        ],
        "tables": tables,
    }


def format_report(report):
    lines = []
    w = report["workload"]
    lines.append(f"workload: input {w['input_dim']}, batch {w['batch_size']}, T {w['seq_len']}, "
                 f"{w['iters']} iters after {w['warmup']} warmup, {w['dtype']}, bn={w['bn']}")
    for table, rows in report["tables"].items():
        lines.append(f"\n[{table}]")
        lines.append(f"{'arch':<10} {'hidden':>6} {'params':>9} {'fwd us':>10} "
                     f"{'fwd+bwd us':>11} {'epoch s':>8} {'vs GRU':>7}")
        for r in rows:
            red = r["reduction_vs_gru"]
            lines.append(
                f"{r['label']:<10} {r['hidden_dim']:>6} {r['param_count']:>9} "
                f"{r['forward_us_median']:>10.0f} {r['fwd_bwd_us_median']:>11.0f} "
                f"{r['epoch_seconds']:>8.1f} {'' if red is None else f'{red:+.1%}':>7}")
    return "\n".join(lines)


# --- gate traces -------------------------------------------------------------

def gate_trace(model, batch):
    """Rows ``(timestep, layer, gate, mean_activation)`` from an eval-mode pass."""
    if model.kind is CellKind.RELU_RNN:
        raise UnsupportedArchitectureError(
            f"{model.kind.label} has no gates to trace")
    _, cache = model.forward(batch, train=False)
    return model.gate_trace(cache)


class UnsupportedArchitectureError(ValueError):
    pass


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float((da * da).sum() * (db * db).sum()))
    if denom == 0.0:
        return float("nan")
    return float((da * db).sum() / denom)


def update_reset_correlation(rows):
    """Pearson correlation of the z and r traces, per layer."""
    out = {}
    layers = sorted({r[1] for r in rows})
    for li in layers:
        z = [m for t, l, g, m in rows if l == li and g == "z"]
        r = [m for t, l, g, m in rows if l == li and g == "r"]
        if z and r:
            out[li] = pearson(z, r)
    return out

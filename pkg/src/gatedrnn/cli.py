"""Command-line entry point: gen-data, train, bench, gates, gradcheck."""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench as benchmod
from .cells import CellKind, corrupt_gradient
from .data import (
    gen_adding_problem,
    gen_framewise_task,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
)
from .layers import ModelStack, SequenceBatch
from .numeric import Rng
from .training import (
    DivergenceError,
    TrainConfig,
    TrainState,
    grad_check,
    sort_and_batch,
    train_model,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_GRADCHECK = 3

METRICS_COLUMNS = ["epoch", "train_loss", "dev_frame_err", "lr", "max_abs_hidden"]
TIMING_COLUMNS = ["epoch", "wall_seconds"]
GATES_COLUMNS = ["timestep", "layer", "gate", "mean_activation"]

log = logging.getLogger("gatedrnn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--seed", type=int, default=0, help="seed for every stochastic step")
    p.add_argument("--config", help="key=value file; command-line flags override it")
    p.add_argument("--out-dir", default=".", help="directory for output files")


def build_parser():
    parser = _Parser(prog="gatedrnn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    _common(g)
    g.add_argument("--task", choices=["adding", "framewise"], required=True)
    g.add_argument("--n", type=int, required=True, help="number of sequences")
    g.add_argument("--T", type=int, default=100, help="sequence length (mean for framewise)")
    g.add_argument("--t-min", type=int, help="framewise: shortest sequence")
    g.add_argument("--t-max", type=int, help="framewise: longest sequence")
    g.add_argument("--feature-dim", type=int, default=10)
    g.add_argument("--num-classes", type=int, default=5)
    g.add_argument("--seg-min", type=int, default=5)
    g.add_argument("--seg-max", type=int, default=15)
    g.add_argument("--noise", type=float, default=1.5, help="framewise noise sigma")
    g.add_argument("--bins", type=int, default=10, help="adding: number of target bins")
    g.add_argument("--n-dev", type=int, default=0,
                   help="extra sequences from the same task written to --dev-out")
    g.add_argument("--dev-out")
    g.add_argument("--out", required=True)

    t = sub.add_parser(
        "train", help="train a model",
        epilog=("outputs: metrics.csv (" + ",".join(METRICS_COLUMNS) + "), timing.csv ("
                + ",".join(TIMING_COLUMNS) + "), batch_order.csv (batch,sequences), "
                "last.ckpt, best.ckpt, final.ckpt"))
    _common(t)
    t.add_argument("--train", required=True, help="training dataset file")
    t.add_argument("--dev", required=True, help="development dataset file")
    t.add_argument("--arch", default="ligru",
                   choices=[k.value for k in CellKind] + ["relurnn", "m-relugru"])
    t.add_argument("--layers", type=int, default=2)
    t.add_argument("--hidden", type=int, default=64)
    t.add_argument("--bn", default="feedforward", choices=["feedforward", "recurrent", "none"])
    t.add_argument("--lr", type=float, default=0.0013)
    t.add_argument("--dropout", type=float, default=0.2)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--epochs", type=int, default=22)
    t.add_argument("--lr-threshold", type=float, default=0.001,
                   help="relative dev improvement below which the LR is halved")
    t.add_argument("--threads", type=int, default=1, help="BLAS threads")
    t.add_argument("--dtype", default="float64", choices=["float64", "float32"])
    t.add_argument("--resume", help="checkpoint to continue from")

    b = sub.add_parser(
        "bench", help="per-step throughput benchmark",
        epilog="output: bench.json (schema in gatedrnn.bench.BENCH_SCHEMA)")
    _common(b)
    b.add_argument("--hidden", type=int, default=465)
    b.add_argument("--input-dim", type=int, default=40)
    b.add_argument("--batch", type=int, default=8)
    b.add_argument("--T", type=int, default=20)
    b.add_argument("--warmup", type=int, default=10)
    b.add_argument("--iters", type=int, default=100)
    b.add_argument("--steps-per-epoch", type=int, default=462)
    b.add_argument("--bn", default="feedforward", choices=["feedforward", "none"])
    b.add_argument("--dtype", default="float64", choices=["float64", "float32"])
    b.add_argument("--archs", default=",".join(k.value for k in benchmod.BENCH_ARCHS))

    q = sub.add_parser(
        "gates", help="average gate activations of a trained model",
        epilog="output: gates.csv (" + ",".join(GATES_COLUMNS) + ")")
    _common(q)
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--seq", default="0", help="comma-separated sequence indices")

    c = sub.add_parser("gradcheck", help="finite-difference check of every architecture")
    _common(c)
    c.add_argument("--arch", default="all")
    c.add_argument("--bn", default="all", choices=["all", "none", "feedforward", "recurrent"])
    c.add_argument("--T", type=int, default=5)
    c.add_argument("--hidden", type=int, default=4)
    c.add_argument("--input-dim", type=int, default=3)
    c.add_argument("--layers", type=int, default=2)
    c.add_argument("--batch", type=int, default=3)
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--coords", type=int, default=20)
    c.add_argument("--threshold", type=float, default=1e-5)
    c.add_argument("--mutate", choices=["drop-term"])
    return parser


def read_config(path):
    """Parse a key=value file into ``--key value`` arguments."""
    args = []
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        args += ["--" + key.replace("_", "-"), value]
    return args


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)
    if getattr(args, "config", None):
        try:
            extra = read_config(args.config)
        except UsageError as e:
            parser.exit(EXIT_USAGE, f"gatedrnn: error: {e}\n")
        pos = argv.index(args.command) + 1
        args = parser.parse_args(argv[:pos] + extra + argv[pos:])
    return args


def _out(args, name):
    os.makedirs(args.out_dir, exist_ok=True)
    return name if os.path.isabs(name) else os.path.join(args.out_dir, name)


# --- subcommands -------------------------------------------------------------

def cmd_gen_data(args):
    rng = Rng(args.seed)
    total = args.n + args.n_dev
    if args.n < 1 or args.n_dev < 0:
        raise UsageError("--n must be >= 1 and --n-dev >= 0")
    if args.n_dev and not args.dev_out:
        raise UsageError("--n-dev needs --dev-out")
    if args.task == "adding":
        if args.T < 2:
            raise UsageError("--T must be >= 2 for the adding problem")
        ds = gen_adding_problem(total, args.T, rng, num_bins=args.bins)
    else:
        lo = args.t_min if args.t_min is not None else max(1, args.T - args.T // 5)
        hi = args.t_max if args.t_max is not None else args.T + args.T // 5
        if args.seg_min < 2 or args.seg_max < args.seg_min or hi < lo:
            raise UsageError("need 2 <= --seg-min <= --seg-max and --t-min <= --t-max")
        ds = gen_framewise_task(total, (lo, hi), args.feature_dim, args.num_classes,
                                (args.seg_min, args.seg_max), args.noise, rng)
    train, dev = ds.split(args.n)
    path = _out(args, args.out)
    save_dataset(train, path)
    frames = sum(len(y) for _, y in train.sequences)
    print(f"wrote {path}: task={args.task} sequences={len(train)} "
          f"feature_dim={train.feature_dim} classes={train.num_classes} frames={frames}")
    if args.n_dev:
        dpath = _out(args, args.dev_out)
        save_dataset(dev, dpath)
        print(f"wrote {dpath}: task={args.task} sequences={len(dev)}")
    return EXIT_OK


def _set_threads(n):
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return threadpool_limits(n)


def cmd_train(args):
    train = load_dataset(args.train)
    dev = load_dataset(args.dev)
    if dev.feature_dim != train.feature_dim or dev.num_classes != train.num_classes:
        raise UsageError("train and dev datasets have different dimensions")
    config = TrainConfig(initial_lr=args.lr, dropout=args.dropout, batch_size=args.batch,
                         epochs=args.epochs, lr_halving_threshold=args.lr_threshold,
                         seed=args.seed)
    if args.resume:
        model, state, _ = load_checkpoint(args.resume)
        if state is None:
            raise UsageError(f"{args.resume} has no optimizer state to resume from")
    else:
        model = ModelStack(args.arch, train.feature_dim, args.hidden, args.layers,
                           train.num_classes, Rng(args.seed).spawn(1),
                           bn=None if args.bn == "none" else args.bn,
                           keep_prob=1.0 - args.dropout, dtype=np.dtype(args.dtype))
        state = TrainState.fresh(model.params(), config.initial_lr)

    metrics_path = _out(args, "metrics.csv")
    timing_path = _out(args, "timing.csv")
    mode = "a" if args.resume else "w"
    with open(_out(args, "batch_order.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["batch", "sequences"])
        for i, b in enumerate(sort_and_batch(train, config.batch_size)):
            w.writerow([i, " ".join(map(str, b.indices))])
    mfh = open(metrics_path, mode, newline="")
    tfh = open(timing_path, mode, newline="")
    mw, tw = csv.writer(mfh, lineterminator="\n"), csv.writer(tfh, lineterminator="\n")
    if not args.resume:
        mw.writerow(METRICS_COLUMNS)
        tw.writerow(TIMING_COLUMNS)

    def on_epoch(em, model, state):
        mw.writerow([em.epoch, repr(em.train_loss), repr(em.dev_frame_err), repr(em.lr),
                     repr(em.max_abs_hidden)])
        tw.writerow([em.epoch, f"{em.wall_seconds:.3f}"])
        mfh.flush()
        tfh.flush()
        save_checkpoint(model, state, _out(args, "last.ckpt"))
        if em.dev_frame_err == state.best_dev:
            save_checkpoint(model, state, _out(args, "best.ckpt"))
        print(f"epoch {em.epoch}: train_loss={em.train_loss:.4f} "
              f"dev_frame_err={em.dev_frame_err:.4f} lr={em.lr:.6g}")

    limits = _set_threads(args.threads)
    try:
        train_model(config, model, train, dev, state=state, on_epoch_end=on_epoch)
    finally:
        mfh.close()
        tfh.close()
        limits.unregister()
    save_checkpoint(model, state, _out(args, "final.ckpt"))
    return EXIT_OK


def cmd_bench(args):
    archs = [CellKind.parse(a) for a in args.archs.split(",") if a]
    limits = _set_threads(1)
    try:
        report = benchmod.run_benchmark(
            input_dim=args.input_dim, hidden_dim=args.hidden, batch_size=args.batch,
            seq_len=args.T, warmup=args.warmup, iters=args.iters,
            dtype=np.dtype(args.dtype), bn=None if args.bn == "none" else args.bn,
            steps_per_epoch=args.steps_per_epoch, archs=archs, rng=Rng(args.seed))
    finally:
        limits.unregister()
    path = _out(args, "bench.json")
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
    print(benchmod.format_report(report))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_gates(args):
    model, _, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    try:
        idx = [int(s) for s in args.seq.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad --seq {args.seq!r}") from None
    if not idx or any(i < 0 or i >= len(ds) for i in idx):
        raise UsageError(f"--seq indices must be in [0, {len(ds)})")
    batch = SequenceBatch.from_sequences([ds.sequences[i] for i in idx], ds.feature_dim,
                                         model.out_W.dtype)
    rows = benchmod.gate_trace(model, batch)
    path = _out(args, "gates.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GATES_COLUMNS)
        for t, layer, gate, m in rows:
            w.writerow([t, layer, gate, f"{m:.6f}"])
    print(f"wrote {path}: {len(rows)} rows")
    if model.kind is CellKind.GRU:
        for layer, r in benchmod.update_reset_correlation(rows).items():
            print(f"pearson_r(update, reset) layer {layer}: {r:.3f}")
    return EXIT_OK


def cmd_gradcheck(args):
    kinds = list(CellKind) if args.arch == "all" else [CellKind.parse(a)
                                                        for a in args.arch.split(",")]
    bns = [None, "feedforward", "recurrent"] if args.bn == "all" else [
        None if args.bn == "none" else args.bn]
    failed = []
    rng = Rng(args.seed)
    for kind in kinds:
        for bn in bns:
            for dropout in (0.0, 0.2):
                model = ModelStack(kind, args.input_dim, args.hidden, args.layers, 5, rng,
                                   bn=bn, keep_prob=1.0 - dropout)
                lengths = [max(1, args.T - i) for i in range(args.batch)]
                batch = SequenceBatch.from_sequences(
                    [(rng.normal((L, args.input_dim)), rng.integers(0, 5, L)) for L in lengths])
                stencil = 4 if bn == "recurrent" else 2
                if args.mutate:
                    with corrupt_gradient(args.mutate):
                        rep = grad_check(model, batch, args.eps, args.coords, rng,
                                         args.threshold, stencil=stencil)
                else:
                    rep = grad_check(model, batch, args.eps, args.coords, rng, args.threshold,
                                     stencil=stencil)
                status = "PASS" if rep.passed else "FAIL"
                print(f"{status} {kind.value:<8} bn={bn or 'none':<11} dropout={dropout:.1f} "
                      f"max_rel_err={rep.max_error:.2e}")
                if not rep.passed:
                    for name, err in rep.failures().items():
                        print(f"    {name}: {err:.3e}")
                    failed.append((kind, bn, dropout))
    print("PASS" if not failed else f"FAIL ({len(failed)} configurations)")
    return EXIT_OK if not failed else EXIT_GRADCHECK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "bench": cmd_bench,
    "gates": cmd_gates,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"gatedrnn {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"gatedrnn {args.command}: diverged: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except benchmod.UnsupportedArchitectureError as e:
        print(f"gatedrnn {args.command}: unsupported architecture: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as e:
        print(f"gatedrnn {args.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Command-line entry point: ``lrcnet {synth,train,eval,segment,gradcheck,sweep}``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage error.
Diagnostics go to stderr; results go to stdout.
"""
import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio, kernels, training
from . import model as mdl
from .config import ConfigError, RunConfig, format_run_config, load_run_config
from .gradcheck import model_gradcheck

log = logging.getLogger("lrcnet")

GRADCHECK_TOL = 1e-5


class UsageError(Exception):
    pass


def _threads(args):
    n = args.threads
    if n is None:
        env = os.environ.get("LRCNET_THREADS")
        n = int(env) if env else 0
    if n <= 0:
        n = os.cpu_count() or 1
    kernels.set_num_threads(n)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(limits=n)


def _load_config(args):
    if not args.config:
        raise UsageError(f"{args.command}: --config PATH is required")
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    run = load_run_config(path)
    if args.seed is not None:
        run.seed = args.seed
    if args.out is not None:
        run.out = args.out
    if args.threads is not None:
        run.threads = args.threads
    base = path.parent
    for key in ("train_manifest", "test_manifest"):
        val = getattr(run.train, key)
        if val and not Path(val).is_absolute():
            setattr(run.train, key, str(base / val))
    return run


def infer_part_sets(clouds):
    """Category -> sorted part labels observed among that category's clouds."""
    sets = {}
    for c in clouds:
        if c.labels is not None and c.class_id is not None:
            sets.setdefault(c.class_id, set()).update(np.unique(c.labels).tolist())
    return {k: sorted(v) for k, v in sets.items()}


def _datasets(run):
    if not run.train.train_manifest:
        raise UsageError("config needs train_manifest")
    train_m = dataio.load_manifest(run.train.train_manifest, "train")
    if not len(train_m):
        raise training.TrainingError("training manifest is empty")
    if run.model.task == "classify":
        train_m.check_classes(run.model.num_classes)
    train_set = dataio.load_dataset(train_m)
    test_set = []
    if run.train.test_manifest:
        test_m = dataio.load_manifest(run.train.test_manifest, "test")
        if run.model.task == "classify":
            test_m.check_classes(run.model.num_classes)
        test_set = dataio.load_dataset(test_m)
    part_sets = infer_part_sets(train_set + test_set) if run.model.task == "segment" else None
    return train_set, test_set, part_sets


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    out = Path(args.out or "./data")
    seed = 7 if args.seed is None else args.seed
    tr = dataio.make_dataset(args.task, args.n_train, args.points, args.noise, seed)
    te = dataio.make_dataset(args.task, args.n_test, args.points, args.noise, seed + 1)
    dataio.write_dataset(out, tr, "train")
    dataio.write_dataset(out, te, "test")
    print(f"wrote {len(tr)} train and {len(te)} test clouds to {out}")
    return 0


def cmd_train(args):
    run = _load_config(args)
    with _threads(args) or _null():
        train_set, test_set, part_sets = _datasets(run)
        out = Path(run.out)
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "metrics.tsv"
        with open(log_path, "w", encoding="utf-8") as fh:
            def on_epoch(rec):
                fh.write(rec.line() + "\n")
                fh.flush()
                log.info("epoch %d lr %.3g loss %.4f test %.4f", rec.epoch, rec.lr, rec.train_loss, rec.metric)
            res = training.train(train_set, test_set, run, part_sets, on_epoch=on_epoch)
        mdl.save_checkpoint(out / "checkpoint.lrcn", res.checkpoint)
        mdl.save_checkpoint(out / "best.lrcn", res.best)
    print(f"trained {len(res.history)} epochs ({res.steps} steps); checkpoint in {out}")
    return 0


def _checkpoint_arg(args):
    if not args.ckpt:
        raise UsageError(f"{args.command}: --ckpt PATH is required")
    if not Path(args.ckpt).is_file():
        raise UsageError(f"checkpoint not found: {args.ckpt}")
    return mdl.load_checkpoint(args.ckpt)


def cmd_eval(args):
    ck = _checkpoint_arg(args)
    run = ck.run
    manifest = args.manifest or run.train.test_manifest
    if not manifest:
        raise UsageError("eval: pass --manifest (the checkpoint records no test manifest)")
    with _threads(args) or _null():
        clouds = dataio.load_dataset(dataio.load_manifest(manifest, "test"))
        part_sets = infer_part_sets(clouds) if run.model.task == "segment" else None
        report = training.evaluate(clouds, run.model, ck.tensors(), part_sets)
    print("\n".join(report.lines()))
    return 0


def cmd_segment(args):
    ck = _checkpoint_arg(args)
    run = ck.run
    if run.model.task != "segment":
        raise UsageError("segment: checkpoint was trained for classification")
    inputs = [Path(p) for p in args.inputs]
    if args.manifest:
        inputs += [p for p, _ in dataio.load_manifest(args.manifest, "test").entries]
    if not inputs:
        raise UsageError("segment: no input clouds (pass XYZ files or --manifest)")
    out = Path(args.out or "./runs/segment")
    out.mkdir(parents=True, exist_ok=True)
    params = ck.tensors()
    with _threads(args) or _null():
        for p in inputs:
            cloud = dataio.load_xyz(p)
            logits = mdl.forward_segment(cloud.coords, run.model, params, "eval").data[0]
            labels = np.argmax(logits, axis=1)
            dataio.save_xyz(out / p.name, dataio.PointCloud(cloud.coords), labels)
    print(f"wrote {len(inputs)} labeled clouds to {out}")
    return 0


def cmd_gradcheck(args):
    seed = 0 if args.seed is None else args.seed
    worst = 0.0
    for task in ("classify", "segment"):
        for r in model_gradcheck(task, seed, entries=args.entries):
            worst = max(worst, r.error)
            if args.verbose:
                print(f"{task}\t{r.name}\t{r.entry_error:.3e}\t{r.direction_error:.3e}")
    print(f"max relative error {worst:.3e}")
    return 0 if worst < GRADCHECK_TOL else 1


def cmd_sweep(args):
    run = _load_config(args)
    if not run.sweep:
        raise UsageError("sweep: config declares no sweep.<key> = a | b | ... lines")
    with _threads(args) or _null():
        train_set, test_set, part_sets = _datasets(run)
        rows = training.sweep(train_set, test_set, run, run.sweep, part_sets)
    metric = "test_miou" if run.model.task == "segment" else "test_acc"
    table = training.format_sweep(rows, metric)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.tsv").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


class _null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (key = value)")
    common.add_argument("--seed", type=int, default=None, help="random seed (default 7)")
    common.add_argument("--out", default=None, help="output directory (default ./runs)")
    common.add_argument("--ckpt", default=None, help="checkpoint file")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $LRCNET_THREADS or all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lrcnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset and manifests")
    p.add_argument("--task", choices=("classify", "segment"), default="classify")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=80)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--noise", type=float, default=0.01)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train from a config file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("segment", parents=[common], help="export per-point predicted labels")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--entries", type=int, default=16, help="sampled entries per parameter tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", parents=[common], help="train a grid of configs and rank them")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"lrcnet {args.command}: {exc}", file=sys.stderr)
        return 2
    except (dataio.DataError, mdl.CheckpointError, mdl.ModelError, training.TrainingError,
            FloatingPointError, OSError, ValueError) as exc:
        print(f"lrcnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

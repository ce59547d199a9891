"""``liquidtad`` command line: generate, train, eval, bench, scaling, ablate, gradcheck.

Exit codes: 0 success, 1 usage or config error, 2 numerical failure
(non-finite values or a failed gradcheck), 3 I/O error.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import os
import platform
import sys

import numpy as np

from . import __version__, checkpoint, config, kernels
from . import engine as E
from . import synthetic
from .ablate import GRIDS, run_ablation
from .bench import BenchConfigError, run_bench, scaling_sweep
from .evaluate import evaluate
from .gradcheck import run as run_gradcheck
from .lqt import CorruptFileError
from .train import NumericalError, predict, train

log = logging.getLogger("liquidtad")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def version_stamp():
    try:
        import numba
        numba_version = numba.__version__
    except ImportError:  # pragma: no cover
        numba_version = None
    return {
        "tool": "liquidtad",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "numba": numba_version,
        "kernels": kernels.backend_name(),
        "precision": np.dtype(E.default_dtype()).name,
    }


def _prepare_out(path, force):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
    os.makedirs(path, exist_ok=True)


def _echo(cfg, out, extra=None):
    config.emit(cfg, os.path.join(out, "resolved_config.json"))
    stamp = version_stamp()
    if extra:
        stamp.update(extra)
    with open(os.path.join(out, "version.json"), "w") as f:
        json.dump(stamp, f, indent=2, sort_keys=True)


def _load_dataset(path):
    if not os.path.isfile(os.path.join(path, "manifest.json")):
        raise FileNotFoundError(f"no dataset manifest in {path}")
    return synthetic.load(path)


def _bind_model(cfg, dataset):
    m = cfg.model
    if m.input_dim != dataset.spec.Cin or m.num_classes != dataset.spec.num_classes:
        raise config.ConfigError(
            f"model expects input_dim={m.input_dim}, num_classes={m.num_classes} but the dataset has "
            f"Cin={dataset.spec.Cin}, num_classes={dataset.spec.num_classes}")
    return m


def write_detections(preds, path):
    """One JSON object per line; times in seconds with 6 decimals."""
    with open(path, "w") as f:
        for vid in sorted(preds):
            for s in preds[vid]:
                f.write(f'{{"video_id": {json.dumps(vid)}, "t_start": {s.start:.6f}, '
                        f'"t_end": {s.end:.6f}, "class": {s.class_id}, "score": {s.score:.6f}}}\n')


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(cfg, args):
    _prepare_out(args.out, args.force)
    ds = synthetic.generate(cfg.data)
    synthetic.save(ds, args.out)
    _echo(cfg, args.out)
    print(f"wrote {len(ds.videos)} videos ({len(ds.split('test'))} test) to {args.out}")


def cmd_train(cfg, args):
    ds = _load_dataset(args.data)
    mcfg = _bind_model(cfg, ds)
    _prepare_out(args.out, args.force)
    _echo(cfg, args.out)

    def on_epoch(epoch, res):
        print(f"epoch {epoch + 1}/{cfg.train.epochs} loss {res.loss_curve[-1]:.5f} "
              f"({res.epoch_times[-1]:.2f}s)", flush=True)

    res = train(ds, mcfg, cfg.train, cfg.eval, os.path.join(args.out, "checkpoint"), on_epoch=on_epoch)
    summary = {
        "initial_loss": res.initial_loss,
        "final_loss": res.final_loss,
        "loss_curve": res.loss_curve,
        "epoch_seconds": res.epoch_times,
        "eval_history": res.eval_history,
        "best_avg_map": res.best_map,
        "best_epoch": res.best_epoch,
    }
    with open(os.path.join(args.out, "train_log.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    print(f"initial loss {res.initial_loss:.5f} final loss {res.final_loss:.5f} "
          f"best synthetic avg mAP {res.best_map}")


def cmd_eval(cfg, args):
    ds = _load_dataset(args.data)
    model = checkpoint.load(args.checkpoint, E.default_dtype())
    _prepare_out(args.out, args.force)
    _echo(cfg, args.out, {"checkpoint": os.path.abspath(args.checkpoint)})
    videos = ds.split(args.split) if args.split != "all" else ds.videos
    if not videos:
        raise config.ConfigError(f"split {args.split!r} is empty")
    preds = predict(model, videos, ds.seconds_per_token, cfg.eval)
    gt = {v.video_id: list(v.segments) for v in videos}
    res = evaluate(preds, gt, cfg.eval.thresholds)
    res.write(os.path.join(args.out, "eval.json"), os.path.join(args.out, "eval.csv"))
    write_detections(preds, os.path.join(args.out, "detections.jsonl"))
    print(f"synthetic avg mAP {res.avg_map:.4f} on {len(videos)} {args.split} videos")


def cmd_bench(cfg, args):
    _prepare_out(args.out, args.force)
    _echo(cfg, args.out)
    rep = run_bench(cfg.bench)
    rep.write(args.out)
    for r in rep.rows:
        print(f"{r['backend']:>15s} T={r['T']:<6d} median {r['median_ms']:10.3f} ms  "
              f"x{r['speedup_vs_parallel']:.1f} vs parallel")
    if rep.unreliable:
        print("warning: timer resolution exceeds 1% of a median; report flagged unreliable")


def cmd_scaling(cfg, args):
    _prepare_out(args.out, args.force)
    _echo(cfg, args.out)
    T_list = sorted(cfg.bench.sequence_lengths) if args.lengths is None else args.lengths
    res = scaling_sweep(None, T_list, cfg.bench, backend=args.backend)
    res.write(args.out)
    for T, lat, fl in zip(res.T, res.latency_ms, res.flops):
        print(f"T={T:<6d} {lat:10.3f} ms  {fl} flops")
    print(f"log-log slope {res.slope:.3f}")


def cmd_ablate(cfg, args):
    ds = _load_dataset(args.data)
    mcfg = _bind_model(cfg, ds)
    _prepare_out(args.out, args.force)
    _echo(cfg, args.out, {"ablation": args.which})

    def on_row(r):
        print(f"{r['setting']:>26s}  {r['status']}  {r.get('error') or ''}", flush=True)

    table = run_ablation(args.which, ds, mcfg, cfg.train, cfg.eval,
                         parallel=cfg.ablate.parallel_grid or args.parallel_grid,
                         workers=cfg.ablate.workers, on_row=on_row)
    table.write(args.out)
    print(table.markdown())


def cmd_gradcheck(cfg, args):
    _prepare_out(args.out, args.force)
    _echo(cfg, args.out)
    results, ok = run_gradcheck(cfg.gradcheck)
    report = {
        "tolerance": cfg.gradcheck.tolerance,
        "step": cfg.gradcheck.step,
        "passed": bool(ok),
        "max_relative_error": {mode: rep for mode, rep in results.items()},
    }
    with open(os.path.join(args.out, "gradcheck.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    for mode, rep in results.items():
        worst = max(rep, key=rep.get)
        print(f"{mode}: {len(rep)} parameter groups, worst {worst} = {rep[worst]:.3e}")
    print("gradcheck " + ("passed" if ok else "FAILED"))
    if not ok:
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "scaling": cmd_scaling,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.epochs=10 (repeatable)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    common.add_argument("--seed", type=int, help="seed for data, training, bench and gradcheck")
    common.add_argument("--precision", choices=["f32", "f64"], default="f32")
    common.add_argument("--threads", type=int, help="BLAS thread limit (bench protocol needs 1)")

    p = _Parser(prog="liquidtad", description="Parallel liquid relaxation detector toolkit")
    p.add_argument("--version", action="version", version=f"liquidtad {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    sp = sub.add_parser("train", parents=[common], help="train a detector")
    sp.add_argument("--data", required=True)
    sp = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="test", choices=["test", "train", "all"])
    sub.add_parser("bench", parents=[common], help="single-thread backend latency comparison")
    sp = sub.add_parser("scaling", parents=[common], help="latency versus sequence length")
    sp.add_argument("--lengths", type=int, nargs="+", help="default: 576 1152 2304 4608")
    sp.add_argument("--backend", default="parallel")
    sp = sub.add_parser("ablate", parents=[common], help="run an ablation grid")
    sp.add_argument("which", choices=sorted(GRIDS))
    sp.add_argument("--data", required=True)
    sp.add_argument("--parallel-grid", action="store_true", help="run grid cells in worker processes")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    return p


def resolve_config(args):
    cfg = config.load(args.config, args.set)
    if args.seed is not None:
        cfg = cfg.replace(
            data=dataclasses.replace(cfg.data, seed=args.seed),
            train=dataclasses.replace(cfg.train, seed=args.seed),
            bench=dataclasses.replace(cfg.bench, seed=args.seed),
            gradcheck=dataclasses.replace(cfg.gradcheck, seed=args.seed),
        )
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg = cfg.replace(bench=dataclasses.replace(cfg.bench, thread_count=args.threads))
    return cfg


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"liquidtad: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "scaling" and args.lengths is None:
        args.lengths = [576, 1152, 2304, 4608]
    try:
        cfg = resolve_config(args)
        limit = contextlib.nullcontext()
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            limit = threadpool_limits(limits=args.threads)
        with E.precision(args.precision), limit:
            code = COMMANDS[args.command](cfg, args)
        return EXIT_OK if code is None else code
    except (UsageError, config.ConfigError, BenchConfigError, synthetic.PackingError) as e:
        print(f"liquidtad: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, E.NonFiniteError, FloatingPointError) as e:
        print(f"liquidtad: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CorruptFileError, synthetic.ManifestMismatchError) as e:
        print(f"liquidtad: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

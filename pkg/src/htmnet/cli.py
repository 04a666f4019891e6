"""``htmnet`` command line: gen, train, eval, infer, gradcheck.

Exit codes: 0 success, 1 runtime failure (failed check, non-finite
loss, bad data), 2 usage error (bad flags, missing checkpoint or config).
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
THREADS_ENV = "HTM_THREADS"


class UsageError(Exception):
    """Reported with exit code 2."""


def _positive(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="htmnet", description="Transparent-object depth completion.")
    parser.add_argument("--threads", type=_positive, default=None,
                        help=f"BLAS thread count (falls back to ${THREADS_ENV}); 1 gives reproducible runs")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="render a synthetic dataset")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--count", type=_positive, required=True)
    gen.add_argument("--size", type=_positive, default=64, help="square image side in pixels")
    gen.add_argument("--out", required=True)
    gen.add_argument("--verify", action="store_true", help="check every sample's invariants after writing")

    train = sub.add_parser("train", help="train a model")
    train.add_argument("--config", default=None, help="key = value config file (defaults if omitted)")
    train.add_argument("--data", required=True)
    train.add_argument("--out", required=True)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--scope", choices=("mask", "all"), default=None)
    ev.add_argument("--config", default=None, help="defaults to config.txt beside the checkpoint")
    ev.add_argument("--csv", default=None, help="also write the report as CSV")

    inf = sub.add_parser("infer", help="complete one depth map")
    inf.add_argument("--ckpt", required=True)
    inf.add_argument("--rgb", required=True, help="P6 image")
    inf.add_argument("--depth", required=True, help="F32R raw depth")
    inf.add_argument("--out", required=True, help="F32R completed depth")
    inf.add_argument("--gt", default=None, help="F32R ground truth; enables the error map")
    inf.add_argument("--mask", default=None, help="U8R1 mask for the error map")
    inf.add_argument("--error-map", default=None, help="P5 path (default: <out>.err.pgm)")
    inf.add_argument("--config", default=None)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every block")
    gc.add_argument("--config", default=None)
    gc.add_argument("--block", action="append", default=None, help="limit to named blocks")
    return parser


def _thread_limit(threads):
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if threads is None:
        return contextlib.nullcontext()
    if threads <= 0:
        raise UsageError("thread count must be positive")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=threads)


def _load_run_config(path, fallback_dir=None):
    from .config import RunConfig, load_config
    if path is None and fallback_dir is not None:
        candidate = os.path.join(fallback_dir, "config.txt")
        path = candidate if os.path.exists(candidate) else None
    if path is None:
        return RunConfig()
    if not os.path.exists(path):
        raise UsageError(f"config file {path} not found")
    return load_config(path)


def _load_model(ckpt, config_path):
    from . import checkpoint
    from .autodiff import precision
    from .model import HTMNet
    if not os.path.isfile(ckpt):
        raise UsageError(f"checkpoint {ckpt} not found")
    cfg = _load_run_config(config_path, os.path.dirname(os.path.abspath(ckpt)))
    dtype = np.float64 if cfg.precision == "f64" else np.float32
    with precision(dtype):
        model = HTMNet(cfg.model)
    checkpoint.load_model(ckpt, model)
    return cfg, model, dtype


def cmd_gen(args) -> int:
    from .synth import dataset, verify_sample, write_dataset
    written = write_dataset(args.out, dataset(args.seed, args.count, args.size))
    print(f"wrote {written} samples to {args.out}")
    if args.verify:
        from .synth import load_dataset
        bad = 0
        for i, sample in enumerate(load_dataset(args.out)):
            for problem in verify_sample(sample):
                print(f"scene {i}: {problem}", file=sys.stderr)
                bad += 1
        if bad:
            return EXIT_FAIL
        print("verify: all samples pass")
    return EXIT_OK


def cmd_train(args) -> int:
    from .synth import load_dataset
    from .train import train
    cfg = _load_run_config(args.config)
    samples = load_dataset(args.data)
    result = train(cfg, samples, args.out, log=print)
    r = result.final
    print(f"done: {result.steps} steps in {result.seconds:.1f}s; rmse {r.rmse:.6g} d105 {r.delta_105:.4f}; "
          f"best rmse {result.best_rmse:.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .autodiff import precision
    from .synth import load_dataset
    from .train import evaluate, format_log_line, stack_samples, LOG_HEADER
    cfg, model, dtype = _load_model(args.ckpt, args.config)
    with precision(dtype):
        data = stack_samples(load_dataset(args.data), dtype)
        loss, report = evaluate(model, data, cfg, scope=args.scope)
    line = format_log_line(0, loss, report)
    print(LOG_HEADER)
    print(line)
    print(f"pixels evaluated: {report.pixel_count}")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="\n") as f:
            f.write(LOG_HEADER + "\n" + line + "\n")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .autodiff import precision
    from .formats import read_f32r, read_ppm, read_u8r, write_f32r, write_pgm
    from .losses import error_map
    cfg, model, dtype = _load_model(args.ckpt, args.config)
    rgb = read_ppm(args.rgb)
    depth = read_f32r(args.depth)
    if rgb.shape[:2] != depth.shape:
        raise ValueError(f"rgb {rgb.shape[:2]} and depth {depth.shape} sizes differ")
    with precision(dtype):
        pred = model.predict(rgb.transpose(2, 0, 1)[None].astype(dtype) / dtype(255.0),
                             depth[None, None].astype(dtype))[0, 0]
    write_f32r(args.out, pred)
    print(f"wrote {args.out}")
    if args.gt:
        gt = read_f32r(args.gt)
        mask = read_u8r(args.mask) if args.mask else np.ones_like(gt, dtype=np.uint8)
        path = args.error_map or args.out + ".err.pgm"
        write_pgm(path, error_map(pred, gt, mask))
        print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import BLOCKS, run_all
    cfg = _load_run_config(args.config) if args.config else None
    if cfg is None:
        from .config import tiny_run_config
        cfg = tiny_run_config()
    names = args.block
    if names:
        unknown = [n for n in names if n not in BLOCKS]
        if unknown:
            raise UsageError(f"unknown block(s) {', '.join(unknown)}; known: {', '.join(BLOCKS)}")
    results = run_all(cfg, names, report=print)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    print(f"gradcheck passed: {len(results)} blocks")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    from .autodiff import NonFiniteError
    from .config import ConfigError
    from .formats import FormatError
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with _thread_limit(args.threads):
            return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"htmnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"htmnet {args.command}: non-finite value: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (FormatError, OSError, ValueError, KeyError) as exc:
        print(f"htmnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

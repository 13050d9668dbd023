"""Command-line entry point: ``supunet {gen-data,train,eval,predict,gradcheck}``.

Exit codes are shared by every subcommand: 0 success, 1 a check failed,
2 usage or validation error, 3 numeric divergence during training.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from supunet import checkpoint, data, losses, pgm, trainer
from supunet.model import ConfigError, UNetConfig, build
from supunet.tensor import ShapeError

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3

# anything in here maps to EXIT_USAGE
_VALIDATION_ERRORS = (
    ConfigError, ShapeError, pgm.DecodeError, checkpoint.CheckpointError,
    losses.ValidationError, ValueError, OSError,
)


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise UsageError("count must be ≥ 1")
    h, w = args.size
    if h < 16 or w < 16:
        raise UsageError(f"phantoms need H, W >= 16, got {h}x{w}")
    path = data.generate_dataset(args.out, args.count, h, w, args.difficulty, args.seed)
    print(path)
    return EXIT_OK


def _load_manifest(path) -> tuple:
    manifest = data.read_manifest(path)
    return manifest, data.load_dataset(manifest)


def cmd_train(args) -> int:
    manifest, samples = _load_manifest(args.data)
    config = UNetConfig(
        input_size=(manifest.height, manifest.width),
        in_channels=samples[0].image.shape[1],
        num_classes=manifest.num_classes,
        depth=args.depth,
        base_channels=args.base,
        fc_hidden=args.fc_hidden,
        lambda_bottleneck=args.lambda_,
    )
    tcfg = trainer.TrainConfig(
        steps=args.steps,
        learning_rate=args.lr,
        momentum=args.momentum,
        batch_size=args.batch_size,
        lambda_bottleneck=args.lambda_,
        seed=args.seed,
        eval_every=args.eval_every,
        checkpoint_path=args.out,
        log_path=Path(str(args.out) + ".log"),
    )
    model, _ = build(config, args.seed)
    try:
        log = trainer.train(model, samples, tcfg)
    except trainer.DivergenceError as exc:
        return _fail(f"training diverged at step {exc.step}: {exc}", EXIT_DIVERGED)
    if log:
        last = log[-1]
        print(f"step {last.step}: L_total={last.total:.6g} L1={last.l1:.6g} CE={last.ce:.6g}")
    print(args.out)
    return EXIT_OK


def _load_checkpoint(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return checkpoint.load(path)


def cmd_eval(args) -> int:
    model = _load_checkpoint(args.ckpt)
    manifest, samples = _load_manifest(args.data)
    if manifest.num_classes != model.config.num_classes:
        raise UsageError(
            f"manifest has {manifest.num_classes} classes, checkpoint expects {model.config.num_classes}"
        )
    report = trainer.evaluate(model, samples)
    if args.json:
        print(losses.to_json(report))
    else:
        print(losses.to_table({Path(args.data).parent.name or "data": report["metrics"]}))
        print(f"bottleneck CE: {report['bottleneck_ce']:.6f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = _load_checkpoint(args.ckpt)
    image = data.load_image(args.image)
    if tuple(image.shape[2:]) != model.config.input_size:
        raise UsageError(
            f"image is {image.shape[2]}x{image.shape[3]}, checkpoint expects "
            f"{model.config.input_size[0]}x{model.config.input_size[1]}"
        )
    if image.shape[1] != model.config.in_channels:
        raise UsageError(f"image has {image.shape[1]} channels, checkpoint expects {model.config.in_channels}")
    labels = trainer.predict(model, image)[0]
    pgm.write(args.out, labels.astype(np.int64), data.MASK_MAXVAL)
    print(args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if not args.eps > 0:
        raise UsageError(f"--eps must be > 0, got {args.eps}")
    if not args.tol > 0:
        raise UsageError(f"--tol must be > 0, got {args.tol}")
    ok = True
    for lam in (0.0, 1.0):
        config = UNetConfig(
            input_size=tuple(args.size), depth=args.depth, base_channels=args.base,
            fc_hidden=args.fc_hidden, lambda_bottleneck=lam,
        )
        report = trainer.gradcheck(config, seed=args.seed, eps=args.eps, tol=args.tol)
        print(f"lambda={lam:g}  worst={report.worst:.3e}  tol={args.tol:g}")
        for line in report.lines():
            print("  " + line)
        ok &= report.passed
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="supunet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write a synthetic phantom dataset and manifest")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--count", required=True, type=int)
    p.add_argument("--size", nargs=2, type=int, default=[32, 32], metavar=("H", "W"))
    p.add_argument("--difficulty", choices=sorted(data.DIFFICULTY), default="easy")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model; the log is written to CKPT.log")
    p.add_argument("--data", required=True, type=Path, help="manifest file")
    p.add_argument("--out", required=True, type=Path, help="checkpoint path")
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--base", type=int, default=8)
    p.add_argument("--fc-hidden", type=int, default=256)
    p.add_argument("--lambda", dest="lambda_", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=_positive_int, default=4)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print specificity, sensitivity and accuracy")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--json", action="store_true", help="key-sorted JSON instead of a table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write the predicted mask of one image")
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--base", type=int, default=2)
    p.add_argument("--size", nargs=2, type=int, default=[8, 8], metavar=("H", "W"))
    p.add_argument("--fc-hidden", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage and 0 for --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(str(exc), EXIT_USAGE)
    except _VALIDATION_ERRORS as exc:
        return _fail(str(exc), EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())

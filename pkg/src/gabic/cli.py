"""Command-line entry point: ``gabic train|encode|decode|eval|maps|selftest``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import checkpoint
from . import range_coder as rc
from . import tensor as T
from .checkpoint import CheckpointError
from .codec import BitstreamError, ConfigMismatchError, allocation_diff, allocation_map, analyse_image
from .codec import decode_image, render_map
from .network import PAPER_LAMBDAS
from .ppm import ImageFormatError, read_image, write_image

log = logging.getLogger("gabic")

# Exit codes, one per failure category.
EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_MISMATCH = 5
EXIT_CORRUPT = 6
EXIT_INVALID = 7
EXIT_SELFTEST = 8


class UsageError(Exception):
    pass


class SelftestFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def read_config_file(path: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def _parse_k(text: str) -> tuple[int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected N or N1,N2")
    return tuple(parts)


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value file; command-line flags take precedence")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="gabic", description="Graph-attention learned image codec (toy scale).")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help):
        return sub.add_parser(name, help=help, parents=[common])

    p = add("train", "train one model at one lambda")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", help="folder of .ppm training images")
    src.add_argument("--synthetic", action="store_true", help="use the built-in synthetic dataset (default)")
    p.add_argument("--lambda", dest="lam", type=float, default=0.025)
    p.add_argument("--mode", choices=("knn", "dense"), default="knn")
    p.add_argument("--k", type=_parse_k, default=None, help="neighbours per node: N or N1,N2 per block")
    p.add_argument("--out", required=True, help="checkpoint written at the best validation loss")
    p.add_argument("--steps", type=int, default=None, help="stop after this many steps")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--log", help="per-step CSV log")
    p.add_argument("--state", help="write resumable training state here at the end")
    p.add_argument("--resume", help="continue from a state file written with --state")
    p.add_argument("--init", help="start from the weights of this checkpoint")
    p.add_argument("--precision", type=int, choices=(32, 64), default=32)

    p = add("encode", "compress a .ppm image")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--recon", help="also write the encoder-side reconstruction")

    p = add("decode", "decompress a bitstream to .ppm")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = add("eval", "rate-distortion sweep over checkpoints")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--images", required=True, help="folder of .ppm images")
    p.add_argument("--csv", required=True)
    p.add_argument("--gnuplot", help="write a gnuplot script plotting the averaged curve")

    p = add("maps", "bit-allocation maps of two models and their difference")
    p.add_argument("--model-a", required=True)
    p.add_argument("--model-b", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out-prefix", required=True)

    add("selftest", "run the built-in invariant checks")
    return parser


def _subparser(parser: _Parser, command: str) -> _Parser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise UsageError(f"unknown command {command}")


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    values = read_config_file(args.config)
    sub = _subparser(parser, args.command)
    actions = {}
    for a in sub._actions:
        actions[a.dest] = a
        for opt in a.option_strings:
            actions[opt.lstrip("-").replace("-", "_")] = a
    explicit = {a.dest for a in sub._actions for opt in a.option_strings
                for arg in argv if arg == opt or arg.startswith(opt + "=")}
    for key, text in values.items():
        action = actions.get(key)
        if action is None or action.dest in ("config", "help"):
            raise UsageError(f"{args.config}: unknown key {key!r} for {args.command}")
        if action.dest in explicit:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            value = text.lower() in ("1", "true", "yes", "on")
        elif action.nargs in ("+", "*"):
            value = text.split()
        else:
            try:
                value = action.type(text) if action.type else text
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{args.config}: bad value for {key}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"{args.config}: {key} must be one of {sorted(action.choices)}")
        setattr(args, action.dest, value)
    return args


def _require(path: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return path


def _rgb(image: np.ndarray) -> np.ndarray:
    return np.repeat(image[..., None], 3, axis=2) if image.ndim == 2 else image


# -- commands --------------------------------------------------------------------------

def cmd_train(args) -> None:
    from .trainer import TrainConfig, train

    config = TrainConfig(lam=args.lam, crop=args.crop, batch=args.batch, lr0=args.lr, epochs=args.epochs,
                         seed=args.seed, attention=args.mode, k=args.k, max_steps=args.steps)
    images = _require(args.data) if args.data else None
    model = None
    if args.init:
        model, _, _ = checkpoint.load(_require(args.init), dtype=T.get_dtype())
    if args.resume:
        _require(args.resume)
    result = train(config, model=model, images=images, out=args.out, log_csv=args.log,
                   resume=args.resume, state_out=args.state)
    last = result.log[-1] if result.log else {}
    print(f"trained {len(result.log)} steps; last loss {last.get('loss', float('nan')):.4f}; "
          f"best validation loss {result.best_val:.4f}; checkpoint {args.out}")


def cmd_encode(args) -> None:
    model, meta, _ = checkpoint.load(_require(args.model))
    image = _rgb(read_image(_require(args.input)))
    lam = meta.get("lambda")
    index = PAPER_LAMBDAS.index(lam) if lam in PAPER_LAMBDAS else 0
    state = analyse_image(image, model, index)
    data = state.data
    Path(args.out).write_bytes(data)
    if args.recon:
        write_image(args.recon, state.reconstruction)
    h, w = image.shape[:2]
    print(f"{len(data)} bytes, {8 * len(data) / (h * w):.4f} bpp (estimate {state.estimated_bits / (h * w):.4f})")


def cmd_decode(args) -> None:
    model, _, _ = checkpoint.load(_require(args.model))
    image = decode_image(Path(_require(args.input)).read_bytes(), model)
    write_image(args.out, image)
    print(f"decoded {image.shape[1]}x{image.shape[0]} to {args.out}")


def cmd_eval(args) -> None:
    from .evaluator import gnuplot_script, rd_sweep, summary_table, write_csv, write_curve_csv

    for m in args.models:
        _require(m)
    result = rd_sweep(args.models, _require(args.images))
    write_csv(args.csv, result.rows)
    print(f"wrote {len(result.rows)} rows to {args.csv}")
    try:
        curve = result.curve
    except ValueError as exc:
        log.warning("no averaged curve: %s", exc)
        return
    if args.gnuplot:
        curve_csv = str(Path(args.gnuplot).with_suffix(".curve.csv"))
        write_curve_csv(curve_csv, curve)
        Path(args.gnuplot).write_text(gnuplot_script({"model": curve_csv}))
    print(summary_table([curve]))


def cmd_maps(args) -> None:
    model_a, _, _ = checkpoint.load(_require(args.model_a))
    model_b, _, _ = checkpoint.load(_require(args.model_b))
    image = _rgb(read_image(_require(args.input)))
    map_a, map_b = allocation_map(image, model_a), allocation_map(image, model_b)
    diff, rgb = allocation_diff(map_a, map_b)
    prefix = args.out_prefix
    write_image(f"{prefix}_a.pgm", render_map(map_a.cropped()))
    write_image(f"{prefix}_b.pgm", render_map(map_b.cropped()))
    write_image(f"{prefix}_diff.ppm", rgb)
    np.savetxt(f"{prefix}_diff.csv", diff, delimiter=",", fmt="%.6g")
    print(f"bits a {map_a.total:.1f}, b {map_b.total:.1f}; diff range [{diff.min():.4g}, {diff.max():.4g}]")


def cmd_selftest(args) -> None:
    from .selftest import run

    if not run():
        raise SelftestFailed("one or more checks failed")


COMMANDS = {"train": cmd_train, "encode": cmd_encode, "decode": cmd_decode, "eval": cmd_eval,
            "maps": cmd_maps, "selftest": cmd_selftest}

# Order matters: subclasses before their bases.
ERRORS = [
    (UsageError, EXIT_USAGE, "usage"),
    (FileNotFoundError, EXIT_MISSING, "missing-file"),
    (ConfigMismatchError, EXIT_MISMATCH, "config-mismatch"),
    (BitstreamError, EXIT_CORRUPT, "corrupt-stream"),
    (rc.DecodeError, EXIT_CORRUPT, "corrupt-stream"),
    (CheckpointError, EXIT_FORMAT, "bad-checkpoint"),
    (ImageFormatError, EXIT_FORMAT, "bad-image"),
    (SelftestFailed, EXIT_SELFTEST, "selftest-failed"),
    (ValueError, EXIT_INVALID, "invalid-argument"),
]


def _thread_limit():
    threads = os.environ.get("GABIC_THREADS")
    if not threads:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(threads))


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        resolved = {k: v for k, v in sorted(vars(args).items())}
        log.info("resolved config %s", json.dumps(resolved, default=str, sort_keys=True))
        precision = T.precision(args.precision) if getattr(args, "precision", 32) == 64 else nullcontext()
        with _thread_limit(), precision:
            COMMANDS[args.command](args)
        return EXIT_OK
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:
        for kind, code, category in ERRORS:
            if isinstance(exc, kind):
                print(f"error: {category}: {exc}", file=sys.stderr)
                return code
        print(f"error: internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

"""Command line: gen, train, eval, profile, gradcheck.

Every subcommand accepts ``--config FILE``: flat ``key=value`` lines, ``#``
comments, keys named like the long flags (``p-slow`` or ``p_slow``). Values
given on the command line win over the file, the file wins over defaults.
Unknown keys are usage errors.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
THREADS_ENV = "MEMLANE_THREADS"
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class UsageError(Exception):
    pass


# argument types ------------------------------------------------------------------


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _nonnegative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _probability(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0.0 or not math.isfinite(value):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _policy(text: str):
    from .inference import Policy, PolicyError

    try:
        return Policy.parse(text)
    except PolicyError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# config file ---------------------------------------------------------------------


def read_config(path: str | Path) -> dict[str, str]:
    """Parse a flat key=value file. Keys are normalized to argparse dests."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise UsageError(f"{path}:{lineno}: empty key")
        values[key.replace("-", "_")] = value
    return values


def _apply_config(parser: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config", "command")}
    defaults = {}
    for key, text in values.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"unknown config key {key!r}")
        if action.nargs == 0 or isinstance(action, argparse.BooleanOptionalAction):
            lowered = text.lower()
            if lowered not in _TRUE | _FALSE:
                raise UsageError(f"config key {key!r} expects a boolean, got {text!r}")
            defaults[key] = lowered in _TRUE
            continue
        try:
            value = action.type(text) if action.type else text
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"config key {key!r}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key!r}: {text!r} is not one of {sorted(action.choices)}")
        defaults[key] = value
    parser.set_defaults(**defaults)
    for action in parser._actions:
        if action.dest in defaults:
            action.required = False


# commands ------------------------------------------------------------------------


def _select_split(samples, split: str):
    from .datagen import split_dataset

    if split == "all":
        return samples
    train, held_out = split_dataset(samples)
    return train if split == "train" else held_out


def cmd_gen(args) -> int:
    from .datagen import SceneParams, flip_augment, generate
    from .dataio import save_dataset

    if args.sequences < 1:
        raise UsageError("need at least 1 sequence")
    params = SceneParams(
        seed=args.seed,
        num_sequences=args.sequences,
        frames_per_sequence=args.length,
        image_size=args.size,
    )
    samples = generate(params)
    if args.augment:
        samples = flip_augment(samples)
    save_dataset(args.out, samples)
    print(f"wrote {len(samples)} sequences to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .dataio import load_dataset, save_checkpoint
    from .training import TrainConfig, train

    dataset = _select_split(load_dataset(args.data), args.split)
    config = TrainConfig(
        pipeline=args.pipeline,
        seq_len=args.seq_len,
        p_slow_train=args.p_slow,
        epochs=args.epochs,
        lr=args.lr,
        seed=args.seed,
        clip_norm=args.clip_norm,
    )
    out = Path(args.out)
    loss_csv = Path(args.loss_csv) if args.loss_csv else out.with_suffix(".loss.csv")
    start = time.perf_counter()

    def on_epoch_end(epoch, params, loss):
        print(f"epoch {epoch + 1}/{config.epochs} loss={loss:.6f} t={time.perf_counter() - start:.1f}s", flush=True)
        if args.checkpoint_every and (epoch + 1) % args.checkpoint_every == 0:
            save_checkpoint(out.with_suffix(f".epoch{epoch + 1}{out.suffix}"), params)

    result = train(dataset, config, on_epoch_end=on_epoch_end)
    save_checkpoint(out, result.params)
    with open(loss_csv, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss"])
        for epoch, loss in enumerate(result.epoch_losses, 1):
            writer.writerow([epoch, repr(loss)])
    print(f"trained {result.steps} steps on {len(dataset)} sequences; wrote {out} and {loss_csv}")
    return EXIT_OK


def _policy_from_args(args):
    from dataclasses import replace

    return replace(args.policy, clear_on_slow=args.clear_on_slow, seed=args.policy_seed)


def cmd_eval(args) -> int:
    from .dataio import export_mask, load_checkpoint, load_dataset, write_metrics_csv
    from .metrics import evaluate

    samples = _select_split(load_dataset(args.data), args.split)
    params = load_checkpoint(args.model, input_size=samples[0].frames.shape[-1])
    policy = _policy_from_args(args)
    name = args.name or Path(args.model).stem
    result = evaluate(params, samples, policy, name=name, warmup=args.warmup)
    row = result.row
    flag = " (tc unnormalized)" if row.tc_unnormalized else ""
    print(
        f"name={row.name} strategy={row.strategy} avg_iou={row.avg_iou:.4f} "
        f"avg_fps={row.avg_fps:.2f} temporal_consistency={row.temporal_consistency:.4f}{flag}"
    )
    if args.csv_out:
        write_metrics_csv([row], args.csv_out)
    if args.masks_out:
        root = Path(args.masks_out)
        root.mkdir(parents=True, exist_ok=True)
        for s, probs in enumerate(result.predictions):
            for t, p in enumerate(probs):
                export_mask(p, root / f"seq{s:03d}_frame{t:03d}.pgm")
    if args.schedule_out:
        from .inference import run_stream

        _, schedule = run_stream(samples[0].frames, params, policy)
        schedule.to_csv(args.schedule_out)
    return EXIT_OK


def _profile_frames(args, size: int) -> np.ndarray:
    from .datagen import SceneParams, generate
    from .dataio import load_dataset

    if args.data:
        samples = load_dataset(args.data)
    else:
        length = 30
        count = -(-args.frames // length)
        samples = generate(SceneParams(seed=args.seed, num_sequences=count, frames_per_sequence=length, image_size=size))
    frames = np.concatenate([s.frames for s in samples])
    if len(frames) < args.frames:
        raise UsageError(f"--frames {args.frames} exceeds the {len(frames)} frames available in {args.data}")
    return frames[: args.frames]


def cmd_profile(args) -> int:
    from .dataio import load_checkpoint
    from .inference import profile_fps

    if args.warmup >= args.frames:
        raise UsageError(f"--warmup ({args.warmup}) must be smaller than --frames ({args.frames})")
    params = load_checkpoint(args.model, input_size=args.size)
    frames = _profile_frames(args, params.arch.input_size)
    fps = profile_fps(frames, params, _policy_from_args(args), warmup=args.warmup)
    print(f"avg_fps={fps:.2f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import grad_check, model_check_problem

    f, params = model_check_problem(size=args.size, seed=args.seed)
    start = time.perf_counter()
    report = grad_check(
        f, params, tolerance=args.tolerance, max_entries=args.max_entries or None, seed=args.seed, floor=args.grad_floor
    )
    print(report.format())
    print(f"checked {len(report.checks)} parameter tensors in {time.perf_counter() - start:.1f}s")
    return EXIT_OK if report.passed else EXIT_RUNTIME


# parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .training import Pipeline

    parser = argparse.ArgumentParser(prog="memlane", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="flat key=value file of flag defaults")
        return p

    def policy_flags(p: argparse.ArgumentParser, default: str) -> None:
        p.add_argument("--policy", type=_policy, default=default, help="always-fast | always-slow | one-in:N | randn:THETA")
        p.add_argument("--clear-on-slow", action=argparse.BooleanOptionalAction, default=True,
                       help="zero the memory before every slow frame")
        p.add_argument("--policy-seed", type=int, default=0, help="PRNG seed of randn policies")

    p = command("gen", "generate a synthetic road-sequence dataset (MGRD)")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--sequences", type=int, default=10)
    p.add_argument("--length", type=_positive_int, default=30, help="frames per sequence")
    p.add_argument("--size", type=_positive_int, default=64, help="image height and width")
    p.add_argument("--augment", action="store_true", help="append horizontally mirrored copies")
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_gen)

    p = command("train", "train a model checkpoint (MGWT)")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("all", "train", "eval"), default="all",
                   help="train on the whole file or on one side of the 80/20 split")
    p.add_argument("--pipeline", choices=[x.value for x in Pipeline], default=Pipeline.SEQUENTIAL.value)
    p.add_argument("--epochs", type=_nonnegative_int, default=10)
    p.add_argument("--lr", type=_positive_float, default=3e-4)
    p.add_argument("--p-slow", type=_probability, default=0.7, help="probability of the slow extractor per frame")
    p.add_argument("--seq-len", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clip-norm", type=_positive_float, default=None)
    p.add_argument("--checkpoint-every", type=_nonnegative_int, default=0, help="also save every N epochs (0: off)")
    p.add_argument("--loss-csv", default=None, help="per-epoch loss log (default: <out>.loss.csv)")
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_train)

    p = command("eval", "stream a dataset through a checkpoint and report IoU, FPS and TC")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("all", "train", "eval"), default="all")
    policy_flags(p, "one-in:10")
    p.add_argument("--warmup", type=_nonnegative_int, default=0, help="frames per sequence left out of FPS")
    p.add_argument("--name", default=None, help="model name for the metrics row (default: checkpoint stem)")
    p.add_argument("--csv-out", default=None)
    p.add_argument("--masks-out", default=None, help="directory for binary PGM masks")
    p.add_argument("--schedule-out", default=None, help="CSV of the first sequence's per-frame decisions")
    p.set_defaults(run=cmd_eval)

    p = command("profile", "measure streaming FPS of a checkpoint under a policy")
    p.add_argument("--model", required=True)
    policy_flags(p, "one-in:10")
    p.add_argument("--frames", type=_positive_int, default=200)
    p.add_argument("--warmup", type=_nonnegative_int, default=10)
    p.add_argument("--data", default=None, help="stream this dataset instead of freshly generated frames")
    p.add_argument("--size", type=_positive_int, default=None, help="input size if not inferable (default 64)")
    p.add_argument("--seed", type=int, default=42, help="generator seed for the profiling frames")
    p.set_defaults(run=cmd_profile)

    p = command("gradcheck", "compare analytic gradients with central differences")
    p.add_argument("--size", type=_positive_int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=("double",), default="double")
    p.add_argument("--tolerance", type=_positive_float, default=1e-4)
    p.add_argument("--max-entries", type=_nonnegative_int, default=32,
                   help="entries sampled per tensor on top of the directional check (0: every entry)")
    p.add_argument("--grad-floor", type=_positive_float, default=1e-6,
                   help="gradients below this magnitude are compared on an absolute scale")
    p.set_defaults(run=cmd_gradcheck)
    return parser


def _thread_limit() -> int:
    text = os.environ.get(THREADS_ENV, "1")
    try:
        value = int(text)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {text!r}") from None
    if value < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {text!r}")
    return value


def parse_args(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config:
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config(subparser, read_config(args.config))
        args = parser.parse_args(argv)
    return args


def main(argv: Sequence[str] | None = None) -> int:
    from threadpoolctl import threadpool_limits

    from .datagen import GenerationError
    from .dataio import FormatError
    from .tensor import NonFiniteError

    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if "--config" in argv or any(a.startswith("--config=") for a in argv):
            # required flags may come from the file, so the first pass must not enforce them
            for sp in parser._subparsers._group_actions[0].choices.values():
                for action in sp._actions:
                    action.required = False
            args = parse_args(parser, argv)
            missing = [
                a.option_strings[0]
                for a in build_parser()._subparsers._group_actions[0].choices[args.command]._actions
                if a.required and getattr(args, a.dest) is None
            ]
            if missing:
                raise UsageError(f"missing required {', '.join(missing)}")
        else:
            args = parser.parse_args(argv)
        threads = _thread_limit()
    except UsageError as exc:
        print(f"memlane: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"memlane: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        with threadpool_limits(limits=threads):
            return args.run(args)
    except UsageError as exc:
        print(f"memlane: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, GenerationError, NonFiniteError, ValueError) as exc:
        print(f"memlane: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""``sima`` command line: invariant checks, benchmarks, toy training, saliency, cost reports.

Exit codes: 0 success, 1 failed check or diverged training, 2 usage error,
3 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bench, checks, kernels
from .attention import (
    ConfigError,
    Normalization,
    Variant,
    choose_ordering,
    cosformer_flops_factor,
    count_exp_ops,
    flops_estimate,
    inherent_ordering,
)
from .cost import Ordering
from .model import (
    Activation,
    CheckpointError,
    ModelConfig,
    Pooling,
    TrainingDiverged,
    classifier_forward,
    load_checkpoint,
    make_synthetic_dataset,
    save_checkpoint,
    train_toy,
    write_trace_csv,
)
from .tensor import Rng, ShapeError, precision
from .viz import PGMError, image_to_tokens, read_pgm, token_saliency, write_pgm

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("sima")


class UsageError(Exception):
    """Arguments parsed but are semantically invalid."""


def _variant(text):
    try:
        return Variant.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _variant_list(text):
    return [_variant(part) for part in text.split(",") if part.strip()]


def _int_list(text):
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _nonnegative_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value}")
    return value


def _choice_of(enum_cls, parse=None):
    def convert(text):
        try:
            return parse(text) if parse else enum_cls(text.lower())
        except ValueError:
            names = ", ".join(m.value for m in enum_cls)
            raise argparse.ArgumentTypeError(f"invalid choice {text!r} (choose from {names})") from None
    return convert


def _ordering(text):
    value = _choice_of(Ordering, Ordering.parse)(text)
    if value is Ordering.NOT_APPLICABLE:
        raise argparse.ArgumentTypeError("ordering must be auto, tokens_first or channels_first")
    return value


def _add_globals(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default,
                        help="random seed (falls back to $SIMA_SEED, then 0)")
    parser.add_argument("--precision", type=int, choices=(32, 64), default=default,
                        help="float width (default 64; bench defaults to 32)")


def build_parser():
    parser = argparse.ArgumentParser(prog="sima", description=__doc__.splitlines()[0])
    _add_globals(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true", default=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="{check,bench,train,saliency,flops}")

    p = sub.add_parser("check", help="run the randomized invariant suite")
    _add_globals(p, suppress=True)
    p.add_argument("--sizes", type=_positive_int, default=64,
                   help="largest token count / head width drawn (default 64)")
    p.add_argument("--trials", type=_nonnegative_int, default=20)
    p.add_argument("--inject-fault", choices=checks.FAULTS, default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("bench", help="time single attention blocks")
    _add_globals(p, suppress=True)
    p.add_argument("--variants", type=_variant_list, default=[Variant.SIMA, Variant.MSA])
    p.add_argument("--n-sweep", type=_int_list, default=[256])
    p.add_argument("--d-sweep", type=_int_list, default=[64])
    p.add_argument("--heads", type=_positive_int, default=8)
    p.add_argument("--repeats", type=_positive_int, default=1000)
    p.add_argument("--warmup", type=_nonnegative_int, default=50)
    p.add_argument("--fix-ordering", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--backend", choices=kernels.available_backends(), default=None)
    p.add_argument("--csv", type=Path, default=None)
    p.add_argument("--plotdata", type=Path, default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", help="train the toy classifier")
    _add_globals(p, suppress=True)
    p.add_argument("--variant", type=_variant, default=Variant.SIMA)
    p.add_argument("--heads", type=_positive_int, default=4)
    p.add_argument("--activation", type=_choice_of(Activation), default=Activation.GELU)
    p.add_argument("--norm", type=_choice_of(Normalization, Normalization.parse), default=Normalization.L1)
    p.add_argument("--pooling", type=_choice_of(Pooling), default=Pooling.MEAN)
    p.add_argument("--depth", type=_positive_int, default=2)
    p.add_argument("--dim", type=_positive_int, default=32)
    p.add_argument("--grid", type=_positive_int, default=4, help="patches per image side")
    p.add_argument("--patch", type=_positive_int, default=4, help="pixels per patch side")
    p.add_argument("--samples", type=_positive_int, default=1024)
    p.add_argument("--signal", type=float, default=3.0)
    p.add_argument("--steps", type=_positive_int, default=500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=_positive_int, default=64)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("saliency", help="export a query/key saliency map as PGM")
    _add_globals(p, suppress=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--layer", type=int, default=-1, help="block index; negative counts from the end")
    p.add_argument("--matrix", choices=("q", "k"), default="q")
    p.add_argument("--input", default="synthetic",
                   help="PGM image path, or 'synthetic[:INDEX]' for a generated sample")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--upscale", type=_positive_int, default=16)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("flops", help="closed-form exp and multiply-add counts")
    _add_globals(p, suppress=True)
    p.add_argument("--variant", type=_variant, default=Variant.SIMA)
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--d", type=_positive_int, required=True)
    p.add_argument("--heads", type=_positive_int, default=1)
    p.add_argument("--ordering", type=_ordering, default=Ordering.AUTO)
    p.set_defaults(func=cmd_flops)
    return parser


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("SIMA_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"SIMA_SEED must be an integer, got {env!r}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_check(args):
    report = checks.run_checks(args.sizes, args.trials, _seed(args), fault=args.inject_fault)
    for warning in report.warnings:
        print(f"warning: {warning}")
    for result in report.results:
        print(result.line())
    failed = [r.name for r in report.results if not r.passed]
    print(f"{len(report.results) - len(failed)}/{len(report.results)} properties passed "
          f"in {report.seconds:.1f}s")
    if failed:
        print(f"failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_bench(args):
    try:
        spec = bench.BenchSpec(args.variants, args.n_sweep, args.d_sweep, heads=args.heads,
                               repeats=args.repeats, warmup=args.warmup,
                               fix_ordering=args.fix_ordering, precision=args.precision or 32,
                               seed=_seed(args), backend=args.backend)
    except bench.BenchContractError as exc:
        raise UsageError(str(exc)) from None
    run = bench.run_bench(spec)
    print(f"# backend={run.metadata['backend']} precision={run.metadata['precision']}")
    for warning in run.metadata["warnings"]:
        print(f"# warning: {warning}")
    print(bench.summary_table(run))
    if args.csv:
        bench.emit_csv(run, args.csv)
    if args.plotdata:
        bench.emit_plotdata(run, args.plotdata)
    return EXIT_OK


def cmd_train(args):
    try:
        cfg = ModelConfig(depth=args.depth, dim=args.dim, heads=args.heads, activation=args.activation,
                          variant=args.variant, pooling=args.pooling, normalization=args.norm,
                          patch_grid=args.grid, d_in=args.patch * args.patch)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    if args.signal < 0:
        raise UsageError(f"--signal must be >= 0, got {args.signal}")
    seed = _seed(args)
    args.out.mkdir(parents=True, exist_ok=True)
    with precision(args.precision or 64):
        data = make_synthetic_dataset(Rng(seed).child(2), args.samples, cfg.patch_grid, cfg.d_in, args.signal)
        try:
            result = train_toy(cfg, data, args.steps, args.lr, batch_size=args.batch_size, seed=seed)
        except TrainingDiverged as exc:
            write_trace_csv(exc.trace, args.out / "trace.csv")
            print(f"diverged at step {exc.step} (loss {exc.loss})", file=sys.stderr)
            return EXIT_FAIL
    write_trace_csv(result.trace, args.out / "trace.csv")
    save_checkpoint(args.out / "checkpoint.npz", result.state.params, cfg)
    last = result.trace[-1]
    print(f"steps={last.step} loss={last.loss:.4f} batch_acc={last.accuracy:.3f} "
          f"train_acc={result.final_accuracy:.4f}")
    print(f"wrote {args.out / 'trace.csv'} and {args.out / 'checkpoint.npz'}")
    return EXIT_OK


def _load_input(spec, cfg, seed):
    """``(patch_grid**2, d_in)`` tokens from a PGM file or a generated sample."""
    if spec == "synthetic" or spec.startswith("synthetic:"):
        try:
            index = int(spec.partition(":")[2] or 1)
        except ValueError:
            raise UsageError(f"bad --input {spec!r}: expected synthetic:INDEX") from None
        if index < 0:
            raise UsageError(f"bad --input {spec!r}: index must be >= 0")
        data = make_synthetic_dataset(Rng(seed).child(2), index + 1, cfg.patch_grid, cfg.d_in, 3.0)
        return data.tokens[index]
    image = read_pgm(spec).astype(np.float64) / 255.0
    side = cfg.patch_grid * int(round(cfg.d_in ** 0.5))
    if image.shape != (side, side) or int(round(cfg.d_in ** 0.5)) ** 2 != cfg.d_in:
        raise UsageError(f"input image must be {side}x{side} for this checkpoint, got {image.shape}")
    return image_to_tokens(image, cfg.patch_grid)


def cmd_saliency(args):
    cfg, params = load_checkpoint(args.checkpoint)
    layer = args.layer + cfg.depth if args.layer < 0 else args.layer
    if not 0 <= layer < cfg.depth:
        raise UsageError(f"--layer {args.layer} out of range for a depth-{cfg.depth} model")
    with precision(64):
        tokens = _load_input(args.input, cfg, _seed(args))
        capture = []
        classifier_forward(tokens, cfg, params, capture)
    key = "q_hat" if args.matrix == "q" else "k_hat"
    stacked = capture[layer][key]  # (H, N, d)
    m_hat = np.swapaxes(stacked, 0, 1).reshape(stacked.shape[1], -1)
    if cfg.pooling is Pooling.CLS:
        m_hat = m_hat[1:]
    smap = token_saliency(m_hat, cfg.patch_grid, source=key, layer=layer)
    write_pgm(smap, args.out, args.upscale)
    side = cfg.patch_grid * args.upscale
    print(f"wrote {args.out} ({side}x{side}, {key} of layer {layer})")
    return EXIT_OK


def cmd_flops(args):
    try:
        d = args.d // args.heads if args.d % args.heads == 0 else None
        exp = count_exp_ops(args.variant, args.n, args.d, args.heads)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    auto = choose_ordering(args.n, d)
    own = inherent_ordering(args.variant)
    selected = own or (auto if args.ordering is Ordering.AUTO else args.ordering)
    variant_mul_adds = flops_estimate(args.variant, args.n, args.d, args.heads, selected)
    sima_mul_adds = flops_estimate(Variant.SIMA, args.n, args.d, args.heads, selected)
    cos = cosformer_flops_factor()
    print(f"variant: {args.variant}  N={args.n} D={args.d} H={args.heads} head_dim={d}")
    print(f"exp_ops: {exp.instrumented}")
    print(f"exp_ops_nominal: {exp.nominal}")
    for ordering in (Ordering.TOKENS_FIRST, Ordering.CHANNELS_FIRST):
        print(f"mul_adds[{ordering}]: {flops_estimate(Variant.SIMA, args.n, args.d, args.heads, ordering)}")
    print(f"auto_ordering: {auto}")
    print(f"selected_ordering: {selected}")
    print(f"mul_adds: {variant_mul_adds}")
    print(f"cosformer_mul_adds: {cos.factor * sima_mul_adds} ({cos.factor} x sima {sima_mul_adds})")
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.precision is not None and args.command not in ("bench",):
            with precision(args.precision):
                return args.func(args)
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except (OSError, CheckpointError, PGMError) as exc:
        print(f"sima: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ShapeError as exc:
        print(f"sima: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

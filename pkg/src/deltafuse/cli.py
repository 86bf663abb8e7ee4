"""Command line front end: one verb per library operation.

    merge       combine deltas into a base checkpoint
    delta       subtract one checkpoint from another
    sparsity    report per-layer sparsity of a delta
    sparsify    thin out a delta and write the result
    train       fit one toy adapter and save its delta
    experiment  run the benchmark matrix and write reports
    inspect     describe a checkpoint header without reading the payload

Exit codes are uniform across subcommands: 0 success, 1 usage error
(conflicting or out-of-range flags), 2 data or format error (missing,
malformed or incompatible files), 3 numeric failure (diverged or
non-finite training). Diagnostics go to stderr; stdout carries only the
result. Every output file is written to a temp file and renamed, so an
interrupted run never leaves a partial file behind.

Reruns with identical inputs and flags produce byte-identical outputs.
"""

import argparse
import dataclasses
import math
import sys

from .delta_ops import extract_delta, format_sparsity_report, sparsity
from .errors import DeltafuseError, DivergenceDetected, NonFiniteResult
from .merge_engine import (
    _KNOBS_BY_METHOD,
    METHODS,
    MergeRecipe,
    RecipeInput,
    apply_recipe,
    load_recipe,
)
from .param_core import atomic_write_bytes, load_checkpoint, read_header, save_checkpoint
from .pipeline import (
    LOSSES,
    OPTIMIZERS,
    TrainConfig,
    format_report_table,
    load_experiment_config,
    run_experiment,
    train_adapter,
)
from .sparsify import _REQUIRED_BY_METHOD, GRANULARITIES, SparsifySpec, sparsify_delta
from .toy_models import SupervisedBatch, ToyNet, load_dataset

_EXIT_CODES = """\
exit codes:
  0  success
  1  usage error (conflicting flags or out-of-range values)
  2  data or format error (missing, malformed or incompatible files)
  3  numeric failure (training diverged or produced non-finite values)
"""


class _UsageError(Exception):
    """A flag combination or value the parser alone cannot reject."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; the documented scheme reserves
    # 2 for data errors, so remap parser-level failures to 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _bounded_float(name, low, high, low_open, high_open):
    """argparse type callable enforcing a finite value in an interval."""
    span = f"{'(' if low_open else '['}{low}, {high}{')' if high_open else ']'}"

    def parse(text):
        try:
            value = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number, got {text!r}") from None
        below = value < low or (low_open and value == low)
        above = value > high or (high_open and value == high)
        if not math.isfinite(value) or below or above:
            raise argparse.ArgumentTypeError(f"{name} must be in {span}, got {text}")
        return value

    parse.__name__ = name
    return parse


def _positive_float(name):
    def parse(text):
        try:
            value = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number, got {text!r}") from None
        if not math.isfinite(value) or value <= 0:
            raise argparse.ArgumentTypeError(f"{name} must be positive, got {text}")
        return value

    parse.__name__ = name
    return parse


def _nonnegative_float(name):
    def parse(text):
        try:
            value = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number, got {text!r}") from None
        if not math.isfinite(value) or value < 0:
            raise argparse.ArgumentTypeError(f"{name} must be non-negative, got {text}")
        return value

    parse.__name__ = name
    return parse


def _positive_int(name):
    def parse(text):
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {text!r}") from None
        if value < 1:
            raise argparse.ArgumentTypeError(f"{name} must be at least 1, got {text}")
        return value

    parse.__name__ = name
    return parse


def _parse_delta_flag(text):
    """Split a --delta value into (path, weight); the suffix is optional."""
    path, sep, suffix = text.rpartition(":")
    if sep:
        try:
            return path, float(suffix)
        except ValueError:
            pass
    return text, 1.0


# ---------------------------------------------------------------------------
# Subcommand bodies. Each takes the parsed namespace and returns None on
# success; anything user-facing that can go wrong raises.
# ---------------------------------------------------------------------------


def _cmd_merge(args):
    inline_flags = (
        ("--method", args.method),
        ("--delta", args.delta or None),
        ("--density", args.density),
        ("--drop", args.drop),
        ("--seed", args.seed),
        ("--t", args.t),
        ("--granularity", args.granularity),
        ("--no-normalize", args.no_normalize or None),
    )
    if args.recipe is not None:
        clashes = [flag for flag, value in inline_flags if value is not None]
        if clashes:
            raise _UsageError(
                f"--recipe conflicts with {', '.join(clashes)}; the recipe file decides those"
            )
        recipe = load_recipe(args.recipe)
        if recipe.base is not None and args.base is not None:
            raise _UsageError("--base conflicts with the recipe's own base entry")
        base_path = args.base if args.base is not None else recipe.base
        if base_path is None:
            raise _UsageError("the recipe names no base checkpoint; pass --base")
    else:
        if args.method is None:
            raise _UsageError("pass either --recipe FILE or --method NAME")
        if args.base is None:
            raise _UsageError("the inline form requires --base")
        if not args.delta:
            raise _UsageError("the inline form requires at least one --delta")
        if args.method == "slerp" and len(args.delta) != 2:
            raise _UsageError("slerp requires exactly 2 deltas")
        allowed = _KNOBS_BY_METHOD[args.method]
        kwargs = {}
        for flag, knob in (
            ("--density", "density"),
            ("--drop", "drop"),
            ("--seed", "seed"),
            ("--t", "t"),
            ("--granularity", "granularity"),
        ):
            value = getattr(args, knob)
            if value is None:
                continue
            if knob not in allowed:
                raise _UsageError(f"{flag} does not apply to method {args.method!r}")
            kwargs[knob] = value
        if args.no_normalize:
            if "normalize_weights" not in allowed:
                raise _UsageError(f"--no-normalize does not apply to method {args.method!r}")
            kwargs["normalize_weights"] = False
        inputs = [
            RecipeInput(delta=path, weight=weight)
            for path, weight in map(_parse_delta_flag, args.delta)
        ]
        recipe = MergeRecipe(method=args.method, inputs=inputs, **kwargs)
        base_path = args.base

    base = load_checkpoint(base_path)
    deltas = [load_checkpoint(entry.delta) for entry in recipe.inputs]
    merged = apply_recipe(recipe, base, deltas)
    # The merged file inherits the base's tags, so a no-op merge
    # reproduces the base file byte for byte.
    save_checkpoint(args.out, merged, metadata=base.metadata)

    applied = sparsity(extract_delta(merged, base)).average
    knobs = {
        key: value
        for key, value in recipe.to_dict().items()
        if key not in ("method", "base", "inputs")
    }
    knob_text = "".join(f" {key}={value}" for key, value in sorted(knobs.items()))
    inputs_text = " + ".join(
        entry.delta if entry.weight == 1.0 else f"{entry.delta}:{entry.weight}"
        for entry in recipe.inputs
    )
    summary = f"{recipe.method}: {base_path} + {inputs_text} -> {args.out}"
    if knob_text:
        summary += ";" + knob_text
    print(summary + f"; applied-delta sparsity {applied:.4f}")


def _cmd_delta(args):
    tuned = load_checkpoint(args.ft)
    base = load_checkpoint(args.pre)
    delta = extract_delta(tuned, base, mode=args.mode)
    save_checkpoint(args.out, delta)
    average = sparsity(delta).average
    print(f"delta: {args.ft} - {args.pre} -> {args.out}; sparsity {average:.4f}")


def _cmd_sparsity(args):
    delta = load_checkpoint(args.delta)
    report = sparsity(delta, threshold=args.threshold)
    sys.stdout.write(format_sparsity_report(report))


_SPARSIFY_FLAGS = {
    "drop_prob": "--drop",
    "seed": "--seed",
    "density": "--density",
    "threshold": "--threshold",
}


def _cmd_sparsify(args):
    values = {
        "drop_prob": args.drop,
        "seed": args.seed,
        "density": args.density,
        "threshold": args.threshold,
    }
    required = _REQUIRED_BY_METHOD[args.method]
    missing = [_SPARSIFY_FLAGS[knob] for knob in required if values[knob] is None]
    if missing:
        raise _UsageError(f"method {args.method!r} requires {', '.join(missing)}")
    extra = [
        _SPARSIFY_FLAGS[knob]
        for knob, value in values.items()
        if value is not None and knob not in required
    ]
    if extra:
        raise _UsageError(f"{', '.join(extra)} does not apply to method {args.method!r}")
    if args.granularity is not None and args.method != "trim_topk":
        raise _UsageError(f"--granularity does not apply to method {args.method!r}")
    spec = SparsifySpec(
        method=args.method,
        granularity=args.granularity or "per_tensor",
        **{knob: values[knob] for knob in required},
    )
    delta = load_checkpoint(args.delta)
    thinned = sparsify_delta(delta, spec)
    # Tags describe the delta's origin and survive thinning.
    save_checkpoint(args.out, thinned, metadata=delta.metadata)
    average = sparsity(thinned).average
    knob_text = "".join(
        f" {key}={value}" for key, value in sorted(spec.to_dict().items()) if key != "method"
    )
    print(f"{args.method}: {args.delta} -> {args.out};{knob_text}; sparsity {average:.4f}")


def _cmd_train(args):
    base = load_checkpoint(args.base)
    net = ToyNet(base)
    data = load_dataset(args.data)
    supervised = isinstance(data, SupervisedBatch)
    if args.loss in ("sft", "sft_sparse") and not supervised:
        raise _UsageError(
            f"--loss {args.loss} needs a supervised dataset, {args.data} holds preference pairs"
        )
    if args.loss in ("dpo", "orpo") and supervised:
        raise _UsageError(
            f"--loss {args.loss} needs a preference dataset, {args.data} holds labeled examples"
        )
    try:
        config = TrainConfig(
            steps=args.steps,
            lr=args.lr,
            l1_lambda=args.l1_lambda,
            beta=args.beta,
            seed=args.seed,
            optimizer=args.optimizer,
        )
    except ValueError as exc:
        raise _UsageError(str(exc)) from None
    init_delta = load_checkpoint(args.init_delta) if args.init_delta else None
    ref_delta = load_checkpoint(args.ref_delta) if args.ref_delta else None
    delta = train_adapter(net, args.loss, data, config, init_delta=init_delta, ref_delta=ref_delta)
    save_checkpoint(args.out, delta)
    average = sparsity(delta).average
    meta = delta.metadata
    print(
        f"{args.loss}: loss {meta['initial_loss']} -> {meta['final_loss']}"
        f" in {args.steps} steps; delta sparsity {average:.4f} -> {args.out}"
    )


def _cmd_experiment(args):
    config = load_experiment_config(args.config)
    if args.seeds is not None:
        config = dataclasses.replace(config, seeds=tuple(range(args.seeds)))
    report = run_experiment(config)
    table = format_report_table(report)
    atomic_write_bytes(args.json_out, report.to_json().encode("utf-8"))
    atomic_write_bytes(args.table_out, table.encode("utf-8"))
    sys.stdout.write(table)


def _cmd_inspect(args):
    metadata, entries = read_header(args.path)
    payload = sum(nbytes for _, _, nbytes in entries)
    print(f"{args.path}: {len(entries)} tensors, {payload} payload bytes")
    for key, value in sorted(metadata.items()):
        print(f"metadata {key}={value}")
    for name, shape, nbytes in entries:
        dims = "x".join(str(d) for d in shape) if shape else "scalar"
        print(f"{name} {dims} {nbytes} bytes")


# ---------------------------------------------------------------------------
# Parser assembly
# ---------------------------------------------------------------------------


def _add_sub(sub, name, func, help_text, description=None):
    parser = sub.add_parser(
        name,
        help=help_text,
        description=description or help_text,
        epilog=_EXIT_CODES,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.set_defaults(func=func)
    return parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="deltafuse",
        description="Delta extraction, sparsification and checkpoint merging tools.",
        epilog=_EXIT_CODES,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    from . import __version__

    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="COMMAND")

    p = _add_sub(
        sub,
        "merge",
        _cmd_merge,
        "combine deltas into a base checkpoint",
        "Merge one or more delta checkpoints into a base checkpoint, either "
        "from a JSON recipe file or from inline flags. The two forms are "
        "mutually exclusive.",
    )
    p.add_argument(
        "--recipe",
        metavar="FILE",
        help="JSON merge recipe; conflicts with the inline flags below (exit 1). default: none",
    )
    p.add_argument(
        "--method",
        choices=METHODS,
        help="merge algorithm for the inline form. default: none",
    )
    p.add_argument(
        "--base",
        metavar="FILE",
        help="base checkpoint; with --recipe allowed only when the recipe names none. default: none",
    )
    p.add_argument(
        "--delta",
        metavar="FILE[:WEIGHT]",
        action="append",
        default=[],
        help="delta checkpoint, repeatable; optional :WEIGHT suffix. default weight: 1.0",
    )
    p.add_argument(
        "--density",
        type=_bounded_float("density", 0, 1, True, False),
        help="ties/dare_ties fraction of entries kept, in (0, 1]. default: 0.5",
    )
    p.add_argument(
        "--drop",
        type=_bounded_float("drop", 0, 1, False, True),
        help="dare_ties drop probability, in [0, 1). default: 0.5",
    )
    p.add_argument("--seed", type=int, help="dare_ties drop seed. default: 0")
    p.add_argument(
        "--t",
        type=_bounded_float("t", 0, 1, False, False),
        help="slerp position between the two deltas, in [0, 1]. default: 0.5",
    )
    p.add_argument(
        "--granularity",
        choices=GRANULARITIES,
        help="trim grouping for ties/dare_ties/slerp. default: per_tensor (slerp: global)",
    )
    p.add_argument(
        "--no-normalize",
        action="store_true",
        help="linear only: keep raw weights instead of dividing by their sum. default: off",
    )
    p.add_argument(
        "--out", metavar="FILE", required=True, help="path for the merged checkpoint"
    )

    p = _add_sub(
        sub,
        "delta",
        _cmd_delta,
        "subtract one checkpoint from another",
        "Write the per-tensor difference (fine-tuned minus base) as a delta "
        "checkpoint and print its sparsity.",
    )
    p.add_argument("--ft", metavar="FILE", required=True, help="fine-tuned checkpoint")
    p.add_argument("--pre", metavar="FILE", required=True, help="pre-trained base checkpoint")
    p.add_argument(
        "--mode",
        choices=("strict", "lenient"),
        default="strict",
        help="strict requires identical names; lenient drops one-sided ones. default: strict",
    )
    p.add_argument("--out", metavar="FILE", required=True, help="path for the delta checkpoint")

    p = _add_sub(
        sub,
        "sparsity",
        _cmd_sparsity,
        "report per-layer sparsity of a delta",
        "Print one 'name fraction' line per tensor, then the AVERAGE line. "
        "An entry counts as zero when its magnitude is below the threshold.",
    )
    p.add_argument("--delta", metavar="FILE", required=True, help="delta checkpoint to measure")
    p.add_argument(
        "--threshold",
        type=_positive_float("threshold"),
        default=1e-5,
        help="magnitude below which an entry counts as zero; must be positive. default: 1e-05",
    )

    p = _add_sub(
        sub,
        "sparsify",
        _cmd_sparsify,
        "thin out a delta and write the result",
        "Apply one sparsification transform to a delta checkpoint. Each "
        "method takes exactly the knobs listed for it; others are rejected.",
    )
    p.add_argument("--delta", metavar="FILE", required=True, help="delta checkpoint to thin")
    p.add_argument(
        "--method",
        choices=tuple(sorted(_REQUIRED_BY_METHOD)),
        required=True,
        help="dare needs --drop and --seed; trim_topk needs --density; threshold needs --threshold",
    )
    p.add_argument(
        "--drop",
        type=_bounded_float("drop", 0, 1, False, True),
        help="dare: drop probability, in [0, 1). default: none",
    )
    p.add_argument("--seed", type=int, help="dare: drop seed. default: none")
    p.add_argument(
        "--density",
        type=_bounded_float("density", 0, 1, True, False),
        help="trim_topk: fraction of entries kept, in (0, 1]. default: none",
    )
    p.add_argument(
        "--granularity",
        choices=GRANULARITIES,
        help="trim_topk: rank entries per tensor or globally. default: per_tensor",
    )
    p.add_argument(
        "--threshold",
        type=_positive_float("threshold"),
        help="threshold: prune entries below this magnitude. default: none",
    )
    p.add_argument("--out", metavar="FILE", required=True, help="path for the thinned delta")

    p = _add_sub(
        sub,
        "train",
        _cmd_train,
        "fit one toy adapter and save its delta",
        "Train a delta on top of a base checkpoint with one of the toy "
        "losses and write it as a checkpoint with loss tags attached.",
    )
    p.add_argument("--base", metavar="FILE", required=True, help="base checkpoint to adapt")
    p.add_argument(
        "--data",
        metavar="FILE",
        required=True,
        help="dataset file; supervised for sft losses, preference pairs for dpo/orpo",
    )
    p.add_argument("--loss", choices=LOSSES, required=True, help="training objective")
    p.add_argument(
        "--steps", type=_positive_int("steps"), required=True, help="number of update steps"
    )
    p.add_argument("--lr", type=_positive_float("lr"), required=True, help="learning rate")
    p.add_argument(
        "--l1-lambda",
        type=_nonnegative_float("l1-lambda"),
        default=0.0,
        help="L1 penalty weight, used by sft_sparse. default: 0.0",
    )
    p.add_argument(
        "--beta",
        type=_positive_float("beta"),
        default=1.0,
        help="preference loss temperature for dpo/orpo. default: 1.0",
    )
    p.add_argument("--seed", type=int, default=0, help="shuffling seed. default: 0")
    p.add_argument(
        "--optimizer", choices=OPTIMIZERS, default="sgd", help="update rule. default: sgd"
    )
    p.add_argument(
        "--init-delta",
        metavar="FILE",
        help="delta checkpoint to start from instead of zeros. default: none",
    )
    p.add_argument(
        "--ref-delta",
        metavar="FILE",
        help="reference-policy delta for dpo. default: none",
    )
    p.add_argument("--out", metavar="FILE", required=True, help="path for the trained delta")

    p = _add_sub(
        sub,
        "experiment",
        _cmd_experiment,
        "run the benchmark matrix and write reports",
        "Run the parallel-versus-sequential comparison described by a JSON "
        "config. Prints the text table and writes both report files.",
    )
    p.add_argument("--config", metavar="FILE", required=True, help="experiment config JSON")
    p.add_argument(
        "--seeds",
        type=_positive_int("seeds"),
        metavar="N",
        help="override the config's seed list with 0..N-1. default: the config's seeds",
    )
    p.add_argument(
        "--json-out",
        metavar="FILE",
        default="report.json",
        help="path for the JSON report. default: report.json",
    )
    p.add_argument(
        "--table-out",
        metavar="FILE",
        default="report.txt",
        help="path for the text table. default: report.txt",
    )

    p = _add_sub(
        sub,
        "inspect",
        _cmd_inspect,
        "describe a checkpoint header without reading the payload",
        "Print tensor names, shapes and sizes plus metadata tags. Only the "
        "header bytes are read; the payload is never touched.",
    )
    p.add_argument("path", metavar="FILE", help="checkpoint to describe")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed usage or help
        return int(exc.code or 0)
    try:
        args.func(args)
        return 0
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DivergenceDetected, NonFiniteResult) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DeltafuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

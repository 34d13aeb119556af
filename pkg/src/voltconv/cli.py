"""Command line front end.

One executable, five subcommands:

    voltconv verify                     run the self-check suites
    voltconv bench-speed --out s.csv    time unique-term vs dense paths
    voltconv bench-space --out m.csv    measure term-buffer memory
    voltconv gen-indices N R            export index tables as JSON
    voltconv train-demo --config F      train a small model, log CSV

``--seed``, ``--threads``, and ``--out`` are accepted both before and
after the subcommand name.  CSV goes to ``--out`` when given, stdout
otherwise, so every command is pipeable.

Exit codes: 0 success, 1 verification failure or training divergence,
2 usage or input error, 3 resource limit exceeded.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .bench import (
    SPACE_COLUMNS,
    SPEED_COLUMNS,
    bench_space,
    bench_speed,
    default_space_config,
    default_speed_config,
    write_csv,
)
from .dense import ResourceLimitError
from .positions import count_terms, index_tables, tables_to_json
from .train import (
    TrainingDivergedError,
    demo_from_config,
    parse_config,
    train_demo,
    write_log,
)
from .verify import render_report, report_ok, run_verify, write_report_csv

# Largest index-table row count gen-indices will build without refusing.
INDEX_ROW_BUDGET = 10**8

_EPILOG = """\
CSV schemas
-----------
bench-speed: impl,phase,order,n,batch,channels,median_ns,theory_ops,threads,status
             one row per implementation (evc, tvc) and phase (forward,
             backward) per benchmarked order; median_ns is empty and
             status is 'skipped-resource-limit' when a case would blow
             the element budget.
bench-space: order,n,evc_bytes,tvc_bytes,evc_count,tvc_count,ratio,status
             one row per order; byte figures are the top-order term
             buffer sizes, ratio is evc_count / tvc_count.
verify:      suite,cases,failures,detail   (via --out; report text goes
             to stdout either way)
train-demo:  epoch,train_loss,train_acc,test_acc,wall_seconds
             row 0 is the pre-training evaluation.
gen-indices: JSON, not CSV: {"n": ..., "order": ..., "fpm": {"1": ...},
             "pcms": {...}}; reruns with equal arguments are
             byte-identical.
"""


def _parse_orders(text: str) -> tuple[int, ...]:
    try:
        orders = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got {text!r}")
    if not orders or any(o < 1 for o in orders):
        raise argparse.ArgumentTypeError("orders must be >= 1")
    return orders


def _parse_kernels(text: str) -> tuple[tuple[int, int], ...]:
    sizes = []
    for part in text.split(","):
        try:
            h, w = part.split("x")
            sizes.append((int(h), int(w)))
        except ValueError:
            raise argparse.ArgumentTypeError(
                f"expected HxW pairs like 3x3 or 3x3,5x5, got {text!r}")
    if any(h < 1 or w < 1 for h, w in sizes):
        raise argparse.ArgumentTypeError("kernel sides must be >= 1")
    return tuple(sizes)


def _add_common(parser: argparse.ArgumentParser, *, suppress: bool) -> None:
    # The same three flags exist at the top level and on every
    # subcommand.  The subcommand copies default to SUPPRESS so that an
    # unused flag never overwrites a value parsed before the subcommand
    # name.
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default,
                        help="override the command's random seed")
    parser.add_argument("--threads", type=int, default=default,
                        help="worker threads for bench-speed (default 1)")
    parser.add_argument("--out", default=default, metavar="PATH",
                        help="write CSV/JSON here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voltconv",
        description="higher-order convolution toolkit",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    _add_common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the self-check suites")
    _add_common(p, suppress=True)
    p.add_argument("--fault", choices=["corrupt-pcm"], default=None,
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench-speed",
                       help="time unique-term vs dense forward/backward")
    _add_common(p, suppress=True)
    p.add_argument("--orders", type=_parse_orders, default=(1, 2, 3, 4),
                   help="comma-separated orders (default 1,2,3,4)")
    p.add_argument("--kernel", type=_parse_kernels, default=((3, 3),),
                   dest="kernels", help="kernel sizes, e.g. 3x3 or 3x3,5x5")
    p.add_argument("--channels", type=int, default=10)
    p.add_argument("--batch", type=int, default=10)
    p.add_argument("--out-channels", type=int, default=None,
                   help="defaults to --channels")
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.set_defaults(func=cmd_bench_speed)

    p = sub.add_parser("bench-space",
                       help="measure top-order term buffer sizes")
    _add_common(p, suppress=True)
    p.add_argument("--orders", type=_parse_orders, default=(1, 2, 3, 4))
    p.add_argument("--kernel", type=_parse_kernels, default=((5, 5),),
                   dest="kernels")
    p.add_argument("--channels", type=int, default=1)
    p.set_defaults(func=cmd_bench_space)

    p = sub.add_parser("gen-indices",
                       help="export index tables for (n, r) as JSON")
    _add_common(p, suppress=True)
    p.add_argument("n", type=int, help="input vector length")
    p.add_argument("r", type=int, help="maximum order")
    p.set_defaults(func=cmd_gen_indices)

    p = sub.add_parser("train-demo",
                       help="train a small model from a config file")
    _add_common(p, suppress=True)
    p.add_argument("--config", required=True, metavar="PATH",
                   help="key=value config file")
    p.set_defaults(func=cmd_train_demo)

    return parser


def cmd_verify(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results, worst = run_verify(fault=args.fault, seed=seed)
    print(render_report(results, worst))
    if args.out is not None:
        write_report_csv(results, args.out)
    return 0 if report_ok(results) else 1


def cmd_bench_speed(args) -> int:
    cfg = default_speed_config(
        orders=args.orders,
        kernel_sizes=args.kernels,
        channels=args.channels,
        batch=args.batch,
        out_channels=args.out_channels,
        repetitions=args.repetitions,
        warmup=args.warmup,
        threads=args.threads if args.threads is not None else 1,
        seed=args.seed if args.seed is not None else 0,
    )
    rows = bench_speed(cfg)
    write_csv(rows, SPEED_COLUMNS, args.out if args.out is not None
              else sys.stdout)
    return 0


def cmd_bench_space(args) -> int:
    cfg = default_space_config(
        orders=args.orders,
        kernel_sizes=args.kernels,
        channels=args.channels,
        seed=args.seed if args.seed is not None else 0,
    )
    rows = bench_space(cfg)
    write_csv(rows, SPACE_COLUMNS, args.out if args.out is not None
              else sys.stdout)
    return 0


def cmd_gen_indices(args) -> int:
    rows = sum(count_terms(args.n, j) for j in range(1, args.r + 1))
    if rows > INDEX_ROW_BUDGET:
        raise ResourceLimitError(
            f"index tables for n={args.n}, r={args.r} hold {rows} rows; "
            f"the budget is {INDEX_ROW_BUDGET}")
    text = tables_to_json(index_tables(args.n, args.r))
    if args.out is not None:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_train_demo(args) -> int:
    conf = parse_config(args.config)
    if args.seed is not None:
        conf["seed"] = str(args.seed)
    model, train_set, test_set, cfg = demo_from_config(conf)
    rows = train_demo(model, train_set, test_set, cfg)
    write_log(rows, args.out if args.out is not None else sys.stdout)
    last = rows[-1]
    print(f"epoch {last.epoch}: test accuracy {last.test_acc:.4f}",
          file=sys.stderr)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ResourceLimitError, OverflowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        # Covers malformed configs and datasets, missing files, and
        # unwritable output paths; the message names the offender.
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

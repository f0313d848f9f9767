"""Command-line interface: trace generation, training, simulation, reports.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
inputs, invalid configuration), 3 runtime error (training divergence,
simulation failure). Every subcommand is reproducible from its flags plus the
seed; outputs carry no timestamps.
"""

import argparse
import csv
import sys
from pathlib import Path

from .errors import (
    AggregationError,
    ConfigurationError,
    MoesimError,
    TraceParseError,
    ValidationError,
)
from .pipeline import MODES, MODE_SIMULATED, PipelineConfig, run_pipeline
from .predictor import load_sru_params, save_sru_params, train_predictor
from .report import (
    format_table,
    metrics_row,
    read_metrics_csv,
    summarize,
    write_metrics_csv,
    write_summary_csv,
)
from .simulator import CostModel, ORACLE_PREDICTOR, STRATEGIES, normalize_strategy
from .workload import ModelShape, generate_hot_trace, generate_trace, read_trace, write_trace

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _add_cost_flags(parser):
    parser.add_argument("--t-compute", type=float, default=1.0)
    parser.add_argument("--t-load", type=float, default=10.0)
    parser.add_argument("--t-replicate", type=float, default=2.0)
    parser.add_argument("--t-offload", type=float, default=5.0)


def _add_pipeline_flags(parser):
    parser.add_argument("--queue-capacity", type=int, default=2)
    parser.add_argument("--mode", choices=MODES, default=MODE_SIMULATED)
    parser.add_argument("--hash-build-cost", type=float, default=0.0)


def _add_predictor_source(parser):
    parser.add_argument("--params", help="trained predictor parameter file")
    parser.add_argument(
        "--oracle", action="store_true", help="use the trace's oracle routing as predictor"
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="moesim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    gen = sub.add_parser("gen-trace", parents=[], help="generate a synthetic routing trace")
    gen.add_argument("--layers", type=int, default=4)
    gen.add_argument("--experts", type=int, default=8)
    gen.add_argument("--d-model", type=int, default=32)
    gen.add_argument("--batch-size", type=int, default=64)
    gen.add_argument("--batches", type=int, default=100)
    gen.add_argument("--skew", type=float, default=1.1)
    gen.add_argument(
        "--hot-experts",
        type=int,
        default=0,
        help="if > 0, split every batch evenly over this many experts instead of Zipf sampling",
    )
    gen.add_argument("--noise-scale", type=float, default=0.1)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen_trace)

    train = sub.add_parser("train", help="train the SRU predictor on a trace")
    train.add_argument("--trace", required=True)
    train.add_argument("--epochs", type=int, default=200)
    train.add_argument("--lr", type=float, default=0.001)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--sru-layers", type=int, default=10)
    train.add_argument("--sequences-per-step", type=int, default=32)
    train.add_argument("--out", required=True, help="output directory for params + loss CSV")
    train.set_defaults(func=cmd_train)

    sim = sub.add_parser("simulate", help="simulate one residency strategy over a trace")
    sim.add_argument("--trace", required=True)
    sim.add_argument(
        "--strategy", required=True, choices=[*STRATEGIES, "distinct"], metavar="STRATEGY"
    )
    sim.add_argument("--capacity", type=int, default=0, help="slots per layer; 0 means E")
    _add_predictor_source(sim)
    _add_cost_flags(sim)
    _add_pipeline_flags(sim)
    sim.add_argument("--out", required=True, help="metrics CSV path")
    sim.set_defaults(func=cmd_simulate)

    comp = sub.add_parser("compare", help="run all three strategies on one trace")
    comp.add_argument("--trace", required=True)
    comp.add_argument("--capacity", type=int, default=0, help="slots per layer; 0 means E")
    _add_predictor_source(comp)
    _add_cost_flags(comp)
    _add_pipeline_flags(comp)
    comp.add_argument("--out", required=True, help="output directory")
    comp.set_defaults(func=cmd_compare)

    rep = sub.add_parser("report", help="summarize metrics CSV files")
    rep.add_argument("--metrics", required=True, nargs="+", help="metrics CSV files")
    rep.add_argument("--out", required=True, help="output directory")
    rep.add_argument(
        "--plot-data", action="store_true", help="emit (x, y) CSV series for external plotting"
    )
    rep.set_defaults(func=cmd_report)
    return parser


def cmd_gen_trace(args) -> int:
    shape = ModelShape(
        num_layers=args.layers,
        experts_per_layer=args.experts,
        d_model=args.d_model,
        batch_size=args.batch_size,
    )
    if args.hot_experts > 0:
        trace = generate_hot_trace(
            shape, args.batches, args.hot_experts, args.seed, args.noise_scale
        )
    else:
        trace = generate_trace(shape, args.batches, args.skew, args.seed, args.noise_scale)
    write_trace(trace, args.out)
    print(f"wrote {trace.num_batches} batches to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    trace = read_trace(args.trace)
    result = train_predictor(
        trace,
        epochs=args.epochs,
        learning_rate=args.lr,
        seed=args.seed,
        num_sru_layers=args.sru_layers,
        sequences_per_step=args.sequences_per_step,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_sru_params(result.params, out / "params.txt")
    with open(out / "loss.csv", "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", "loss"])
        for epoch, loss in enumerate(result.loss_curve):
            writer.writerow([epoch, repr(loss)])
    final = result.loss_curve[-1] if result.loss_curve else float("nan")
    print(f"trained {args.epochs} epochs, final loss {final:.6f}; params in {out}")
    return EXIT_OK


def _load_predictor(args, command: str):
    if args.oracle and args.params:
        raise _UsageError(f"{command}: --params and --oracle are mutually exclusive")
    if args.params:
        return load_sru_params(args.params)
    if args.oracle:
        return ORACLE_PREDICTOR
    raise _UsageError(f"{command}: one of --params or --oracle is required")


def _run_strategy(args, trace, strategy, params):
    cost = CostModel(args.t_compute, args.t_load, args.t_replicate, args.t_offload)
    config = PipelineConfig(args.queue_capacity, args.mode, args.hash_build_cost)
    capacity = args.capacity if args.capacity > 0 else trace.shape.experts_per_layer
    result = run_pipeline(trace, strategy, capacity, params, cost, config)
    if result.error is not None:
        raise MoesimError(
            f"pipeline failed at batch {result.failed_batch}: {result.error} "
            f"({result.completed_batches} batches completed)"
        )
    rows = [
        metrics_row(trace.batches[i].index, result.strategy,
                    trace.shape.experts_per_layer, capacity, m)
        for i, m in enumerate(result.per_batch)
    ]
    return result, rows


def cmd_simulate(args) -> int:
    trace = read_trace(args.trace)
    params = _load_predictor(args, "simulate")
    strategy = normalize_strategy(args.strategy)
    result, rows = _run_strategy(args, trace, strategy, params)
    write_metrics_csv(args.out, rows)
    agg = result.aggregate
    print(
        f"{strategy}: latency {agg.batch_latency:.3f}, throughput {agg.throughput:.4f}, "
        f"utilization {agg.utilization:.4f}, stall {agg.stall_time:.3f}"
    )
    return EXIT_OK


def cmd_compare(args) -> int:
    trace = read_trace(args.trace)
    params = _load_predictor(args, "compare")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    all_rows = []
    for strategy in STRATEGIES:
        _, rows = _run_strategy(args, trace, strategy, params)
        all_rows.extend(rows)
    write_metrics_csv(out / "combined.csv", all_rows)
    summary = summarize(all_rows)
    write_summary_csv(out / "summary.csv", summary)
    table = format_table(summary)
    with open(out / "summary.txt", "w", encoding="utf-8") as handle:
        handle.write(table + "\n")
    print(table)
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for path in args.metrics:
        rows.extend(read_metrics_csv(path))
    summary = summarize(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_summary_csv(out / "summary.csv", summary)
    table = format_table(summary)
    with open(out / "summary.txt", "w", encoding="utf-8") as handle:
        handle.write(table + "\n")
    if args.plot_data:
        strategies = sorted({row["strategy"] for row in rows})
        for metric in ("latency", "utilization", "throughput"):
            for strategy in strategies:
                series = [(r["batch"], r[metric]) for r in rows if r["strategy"] == strategy]
                path = out / f"plot_{metric}_{strategy}.csv"
                with open(path, "w", encoding="utf-8", newline="") as handle:
                    writer = csv.writer(handle)
                    writer.writerow(["batch", metric])
                    for x, y in series:
                        writer.writerow([x, repr(y)])
    print(table)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except _UsageError as exc:
        print(f"moesim: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TraceParseError, ValidationError, ConfigurationError, AggregationError) as exc:
        print(f"moesim: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"moesim: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MoesimError as exc:
        print(f"moesim: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Aggregation of per-batch metrics into strategy comparison tables."""

import csv
import math
from dataclasses import dataclass
from typing import Iterable

from .errors import AggregationError
from .simulator import Metrics

METRICS_COLUMNS = [
    "batch",
    "strategy",
    "experts",
    "capacity",
    "num_tokens",
    "latency",
    "throughput",
    "utilization",
    "stall",
    "transfer_time",
    "prediction_accuracy",
    "busy_time",
    "slot_time",
]

SUMMARY_COLUMNS = [
    "strategy",
    "experts",
    "mean_utilization",
    "throughput",
    "total_latency",
    "mean_prediction_accuracy",
]


@dataclass
class SummaryRow:
    strategy: str
    experts: int
    mean_utilization: float
    throughput: float
    total_latency: float
    mean_prediction_accuracy: float


def metrics_row(batch: int, strategy: str, experts: int, capacity: int, m: Metrics) -> dict:
    return {
        "batch": batch,
        "strategy": strategy,
        "experts": experts,
        "capacity": capacity,
        "num_tokens": m.num_tokens,
        "latency": m.batch_latency,
        "throughput": m.throughput,
        "utilization": m.utilization,
        "stall": m.stall_time,
        "transfer_time": m.transfer_time,
        "prediction_accuracy": m.prediction_accuracy,
        "busy_time": m.busy_time,
        "slot_time": m.slot_time,
    }


def write_metrics_csv(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, METRICS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({key: repr(row[key]) if isinstance(row[key], float) else row[key]
                             for key in METRICS_COLUMNS})


def read_metrics_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        missing = [c for c in METRICS_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise AggregationError(f"{path}: metrics CSV missing columns {missing}")
        rows = []
        for record in reader:
            row = dict(record)
            for key in ("batch", "experts", "capacity", "num_tokens"):
                row[key] = int(row[key])
            for key in (
                "latency",
                "throughput",
                "utilization",
                "stall",
                "transfer_time",
                "prediction_accuracy",
                "busy_time",
                "slot_time",
            ):
                row[key] = float(row[key])
            rows.append(row)
    return rows


def summarize(rows: Iterable[dict]) -> list[SummaryRow]:
    """One row per strategy: time-weighted utilization, aggregate throughput.

    Utilization is busy time over slot time summed across batches, so long
    batches dominate; throughput is total tokens over total latency including
    stalls. All rows of a strategy must come from one configuration.
    """
    groups: dict[str, list[dict]] = {}
    order: list[str] = []
    for row in rows:
        strategy = row["strategy"]
        if strategy not in groups:
            groups[strategy] = []
            order.append(strategy)
        groups[strategy].append(row)

    if not groups:
        raise AggregationError("no metric rows to summarize")

    out = []
    for strategy in order:
        batch_rows = groups[strategy]
        for key in ("experts", "capacity", "num_tokens"):
            values = {row[key] for row in batch_rows}
            if len(values) > 1:
                raise AggregationError(
                    f"strategy {strategy!r} mixes configurations: {key} in {sorted(values)}"
                )
        # fsum keeps every aggregate exactly independent of row order.
        busy = math.fsum(row["busy_time"] for row in batch_rows)
        slot_time = math.fsum(row["slot_time"] for row in batch_rows)
        latency = math.fsum(row["latency"] + row["stall"] for row in batch_rows)
        tokens = sum(row["num_tokens"] for row in batch_rows)
        if slot_time <= 0 or latency <= 0:
            raise AggregationError(f"strategy {strategy!r} has zero slot time or latency")
        out.append(
            SummaryRow(
                strategy=strategy,
                experts=batch_rows[0]["experts"],
                mean_utilization=min(1.0, busy / slot_time),
                throughput=tokens / latency,
                total_latency=latency,
                mean_prediction_accuracy=math.fsum(
                    r["prediction_accuracy"] for r in batch_rows
                )
                / len(batch_rows),
            )
        )
    return out


def write_summary_csv(path, rows: list[SummaryRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(SUMMARY_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row.strategy,
                    row.experts,
                    repr(row.mean_utilization),
                    repr(row.throughput),
                    repr(row.total_latency),
                    repr(row.mean_prediction_accuracy),
                ]
            )


def format_table(rows: list[SummaryRow]) -> str:
    """Aligned plain-text comparison table."""
    header = ["strategy", "experts", "utilization", "throughput", "latency", "accuracy"]
    body = [
        [
            row.strategy,
            str(row.experts),
            f"{row.mean_utilization:.4f}",
            f"{row.throughput:.4f}",
            f"{row.total_latency:.4f}",
            f"{row.mean_prediction_accuracy:.4f}",
        ]
        for row in rows
    ]
    widths = [max(len(header[i]), *(len(r[i]) for r in body)) if body else len(header[i])
              for i in range(len(header))]
    lines = [
        "  ".join(header[i].ljust(widths[i]) for i in range(len(header))),
        "  ".join("-" * widths[i] for i in range(len(header))),
    ]
    for r in body:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(header))))
    return "\n".join(lines)

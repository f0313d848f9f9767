"""Producer/consumer overlap of hash building and inference.

One actor predicts hash tables batch by batch and enqueues them into a bounded
FIFO; the other dequeues, places experts, and runs the cost model. Time is
accounted with a deterministic schedule: the producer spends
``hash_build_cost`` per table and blocks on a full queue, the consumer blocks
on an empty one and accrues stall time. ``simulated`` mode computes everything
sequentially; ``concurrent`` mode runs two real threads and must produce the
same hash tables, placements, and metric values, which is what
mode_equivalence_check verifies.
"""

import queue
import threading
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .simulator import (
    BatchOutcome,
    BatchRunner,
    CostModel,
    Metrics,
    ORACLE_PREDICTOR,
    aggregate_metrics,
)
from .validation import check_nonnegative, check_positive

MODE_SIMULATED = "sim"
MODE_CONCURRENT = "concurrent"
MODES = (MODE_SIMULATED, MODE_CONCURRENT)


@dataclass(frozen=True)
class PipelineConfig:
    queue_capacity: int = 2
    mode: str = MODE_SIMULATED
    hash_build_cost: float = 0.0

    def __post_init__(self):
        check_positive("queue_capacity", self.queue_capacity)
        check_nonnegative("hash_build_cost", self.hash_build_cost)
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class PipelineResult:
    strategy: str
    per_batch: list[Metrics]
    outcomes: list[BatchOutcome]
    aggregate: Metrics | None
    total_time: float
    total_stall: float
    failed_batch: int | None = None
    error: str | None = None

    @property
    def completed_batches(self) -> int:
        return len(self.outcomes)


@dataclass(frozen=True)
class _Poison:
    batch_index: int
    message: str


def compute_schedule(build_cost: float, inference_times: list[float], queue_capacity: int):
    """Dequeue times, per-batch stalls, and total time of the two-actor loop.

    The producer finishes table i, then blocks until the queue has space; the
    consumer dequeues when a table is available and it is done with the
    previous batch. Stall i is the time the consumer waits for table i.
    """
    check_positive("queue_capacity", queue_capacity)
    dequeues: list[float] = []
    stalls: list[float] = []
    build_done = build_cost
    consumer_free = 0.0
    for i, inference in enumerate(inference_times):
        space_at = dequeues[i - queue_capacity] if i >= queue_capacity else 0.0
        enqueued = max(build_done, space_at)
        dequeue = max(enqueued, consumer_free)
        stalls.append(dequeue - consumer_free)
        dequeues.append(dequeue)
        consumer_free = dequeue + inference
        build_done = enqueued + build_cost
    return dequeues, stalls, consumer_free


def _sequential_outcomes(runner: BatchRunner, trace):
    outcomes: list[BatchOutcome] = []
    failure = None
    for batch in trace.batches:
        try:
            table = runner.build_table(batch)
        except Exception as exc:  # producer failure poisons the queue
            failure = _Poison(batch.index, f"{type(exc).__name__}: {exc}")
            break
        outcomes.append(runner.run_batch(batch, table))
    return outcomes, failure


def _concurrent_outcomes(runner: BatchRunner, trace, config: PipelineConfig):
    fifo: queue.Queue = queue.Queue(maxsize=config.queue_capacity)
    stop = threading.Event()

    def produce():
        for batch in trace.batches:
            try:
                item = runner.build_table(batch)
            except Exception as exc:
                item = _Poison(batch.index, f"{type(exc).__name__}: {exc}")
            while not stop.is_set():
                try:
                    fifo.put(item, timeout=0.05)
                    break
                except queue.Full:
                    continue
            if isinstance(item, _Poison) or stop.is_set():
                return

    producer = threading.Thread(target=produce, name="hash-builder", daemon=True)
    producer.start()
    outcomes: list[BatchOutcome] = []
    failure = None
    try:
        for batch in trace.batches:
            item = fifo.get()
            if isinstance(item, _Poison):
                failure = item
                break
            outcomes.append(runner.run_batch(batch, item))
    finally:
        stop.set()
        producer.join()
    return outcomes, failure


def run_pipeline(
    trace,
    strategy: str,
    capacity: int,
    params=ORACLE_PREDICTOR,
    cost: CostModel | None = None,
    config: PipelineConfig | None = None,
) -> PipelineResult:
    """Run the two-actor loop over a trace and overlay the queue schedule.

    Hash tables are consumed strictly in batch order; at most
    ``queue_capacity`` tables are ever pending. On a producer failure the
    result carries the metrics of the batches that completed plus the failing
    batch index.
    """
    config = config if config is not None else PipelineConfig()
    runner = BatchRunner(trace, strategy, capacity, params, cost)
    if config.mode == MODE_CONCURRENT:
        outcomes, failure = _concurrent_outcomes(runner, trace, config)
    else:
        outcomes, failure = _sequential_outcomes(runner, trace)

    per_batch = [outcome.metrics for outcome in outcomes]
    total_time = 0.0
    total_stall = 0.0
    if per_batch:
        _, stalls, total_time = compute_schedule(
            config.hash_build_cost, [m.batch_latency for m in per_batch], config.queue_capacity
        )
        for metrics, stall in zip(per_batch, stalls):
            metrics.stall_time = stall
        total_stall = sum(stalls)
    return PipelineResult(
        strategy=runner.strategy,
        per_batch=per_batch,
        outcomes=outcomes,
        aggregate=aggregate_metrics(per_batch) if per_batch else None,
        total_time=total_time,
        total_stall=total_stall,
        failed_batch=failure.batch_index if failure else None,
        error=failure.message if failure else None,
    )


def _placements_equal(a, b) -> bool:
    if len(a.layers) != len(b.layers):
        return False
    return all(
        la.slots == lb.slots and np.array_equal(la.token_to_slot, lb.token_to_slot)
        for la, lb in zip(a.layers, b.layers)
    )


def _metrics_equal(a: Metrics, b: Metrics) -> bool:
    return (
        a.batch_latency == b.batch_latency
        and a.throughput == b.throughput
        and a.utilization == b.utilization
        and a.stall_time == b.stall_time
        and a.transfer_time == b.transfer_time
        and a.busy_time == b.busy_time
        and a.slot_time == b.slot_time
        and a.num_tokens == b.num_tokens
        and a.prediction_accuracy == b.prediction_accuracy
    )


def runs_equivalent(a: PipelineResult, b: PipelineResult) -> bool:
    """True iff two runs agree on every logical output (wall-clock excluded)."""
    if a.completed_batches != b.completed_batches or a.failed_batch != b.failed_batch:
        return False
    if a.total_time != b.total_time or a.total_stall != b.total_stall:
        return False
    for oa, ob in zip(a.outcomes, b.outcomes):
        if oa.table != ob.table:
            return False
        if not _placements_equal(oa.placement, ob.placement):
            return False
        if oa.log.events != ob.log.events or oa.log.fallback_layers != ob.log.fallback_layers:
            return False
        if not _metrics_equal(oa.metrics, ob.metrics):
            return False
    return True


def mode_equivalence_check(
    trace,
    strategy: str,
    capacity: int,
    params=ORACLE_PREDICTOR,
    cost: CostModel | None = None,
    config: PipelineConfig | None = None,
) -> bool:
    """Run simulated-time and concurrent modes and compare their outputs."""
    config = config if config is not None else PipelineConfig()
    sim = run_pipeline(
        trace, strategy, capacity, params, cost,
        PipelineConfig(config.queue_capacity, MODE_SIMULATED, config.hash_build_cost),
    )
    conc = run_pipeline(
        trace, strategy, capacity, params, cost,
        PipelineConfig(config.queue_capacity, MODE_CONCURRENT, config.hash_build_cost),
    )
    return runs_equivalent(sim, conc)

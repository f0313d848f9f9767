"""Deterministic cost model for placements: latency, throughput, utilization.

Timing of one layer: all transfer events run first, serially; then every
resident slot drains its token queue at t_compute per token, slots in
parallel. Makespan is transfer time plus the longest queue; busy time is the
total queued work, which is identical across strategies because every token
is processed exactly once per layer no matter how experts are replicated.

Strategies: ``resident-all`` keeps every expert resident (one replica each,
loaded once at warm-up), ``distinct-only`` loads one replica per predicted
expert, ``replicated`` runs the full planner + placement path. For the
predictor-driven strategies a token whose true expert was not made resident
charges a corrective load before compute, so prediction accuracy shows up in
the end-to-end numbers.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InfeasibleCapacityError, MetricError
from .placement import LOAD, OFFLOAD, REPLICATE, DeviceState, TransferLog, apply_batch
from .planner import ReplicaPlan, cap_replicas, demand_counts
from .predictor import HashTable, SruParams, evaluate_accuracy, predict_batch
from .router_oracle import LayerPlacement, Placement
from .validation import check_nonnegative, check_positive

RESIDENT_ALL = "resident-all"
DISTINCT_ONLY = "distinct-only"
REPLICATED = "replicated"
STRATEGIES = (RESIDENT_ALL, DISTINCT_ONLY, REPLICATED)

ORACLE_PREDICTOR = "oracle"


@dataclass(frozen=True)
class CostModel:
    """Abstract time units for the simulated device."""

    t_compute: float = 1.0
    t_load: float = 10.0
    t_replicate: float = 2.0
    t_offload: float = 5.0

    def __post_init__(self):
        for name in ("t_compute", "t_load", "t_replicate", "t_offload"):
            check_nonnegative(name, getattr(self, name))

    def event_cost(self, kind: str) -> float:
        return {LOAD: self.t_load, REPLICATE: self.t_replicate, OFFLOAD: self.t_offload}[kind]


@dataclass
class Metrics:
    batch_latency: float
    throughput: float
    utilization: float
    stall_time: float
    transfer_time: float
    busy_time: float
    slot_time: float
    num_tokens: int
    prediction_accuracy: float


def simulate_layer(token_to_slot, num_slots: int, events, cost: CostModel):
    """Returns (makespan, busy_time) for one layer.

    ``token_to_slot`` maps each token to the slot that serves it; ``events``
    are this layer's transfer events, executed serially before compute.
    """
    token_to_slot = np.asarray(token_to_slot, dtype=np.int64)
    if token_to_slot.size == 0:
        raise ConfigurationError("token map must be nonempty")
    if num_slots < 1 or token_to_slot.max() >= num_slots or token_to_slot.min() < 0:
        raise ConfigurationError("token map refers to slots outside [0, num_slots)")
    transfer = sum(cost.event_cost(e.kind) for e in events)
    queues = np.bincount(token_to_slot, minlength=num_slots)
    makespan = transfer + float(queues.max()) * cost.t_compute
    busy = float(token_to_slot.size) * cost.t_compute
    return makespan, busy


def utilization(busy_time: float, num_slots: int, makespan: float) -> float:
    """busy / (slots * makespan), clamped to [0, 1]."""
    if makespan <= 0:
        raise MetricError("utilization is undefined for zero makespan")
    check_positive("num_slots", num_slots)
    return float(min(1.0, max(0.0, busy_time / (num_slots * makespan))))


def normalize_strategy(name: str) -> str:
    if name == "distinct":
        return DISTINCT_ONLY
    if name not in STRATEGIES:
        raise ConfigurationError(f"unknown strategy {name!r}; expected one of {STRATEGIES}")
    return name


@dataclass
class BatchOutcome:
    """Everything one batch produced; pipeline equivalence compares these."""

    table: HashTable
    placement: Placement
    log: TransferLog
    metrics: Metrics


class BatchRunner:
    """Stateful executor of one strategy over consecutive batches of a trace."""

    def __init__(self, trace, strategy: str, capacity: int, params=ORACLE_PREDICTOR,
                 cost: CostModel | None = None):
        self.strategy = normalize_strategy(strategy)
        self.trace = trace
        self.params = params
        self.cost = cost if cost is not None else CostModel()
        experts = trace.shape.experts_per_layer
        if self.strategy == RESIDENT_ALL:
            self.capacity = experts  # baseline keeps the whole layer resident
        else:
            self.capacity = check_positive("capacity", capacity)
        self.state = DeviceState(trace.shape.num_layers, self.capacity)
        self._warm = False

    def build_table(self, batch) -> HashTable:
        """The hash-building side: predicted assignments plus replica demand."""
        if isinstance(self.params, SruParams):
            return predict_batch(batch, self.params)
        if self.params == ORACLE_PREDICTOR:
            return HashTable.from_assignment(batch.index, batch.oracle_routing)
        raise ConfigurationError("params must be SruParams or 'oracle'")

    def _plan(self, table: HashTable) -> ReplicaPlan:
        layers = []
        for layer in range(table.num_layers):
            demand = demand_counts(table, layer)
            if self.strategy == DISTINCT_ONLY:
                layers.append({e: 1 for e in demand})
                continue
            try:
                layers.append(cap_replicas(demand, self.capacity))
            except InfeasibleCapacityError:
                layers.append({})  # apply_layer degrades to distinct-only and flags it
        return ReplicaPlan(capacity=self.capacity, layers=layers)

    def run_batch(self, batch, table: HashTable | None = None) -> BatchOutcome:
        if table is None:
            table = self.build_table(batch)
        if self.strategy == RESIDENT_ALL:
            return self._run_resident_all(batch, table)
        return self._run_predicted(batch, table)

    def _run_resident_all(self, batch, table: HashTable) -> BatchOutcome:
        shape = self.trace.shape
        log = TransferLog()
        if not self._warm:
            for layer in range(shape.num_layers):
                for expert in range(shape.experts_per_layer):
                    self.state.add_replica(layer, expert)
                    log.record(LOAD, layer, expert, 0)
            self._warm = True
        layers = []
        for layer in range(shape.num_layers):
            layers.append(
                LayerPlacement(
                    slots=self.state.slots(layer),
                    token_to_slot=batch.oracle_routing[layer].astype(np.int64),
                )
            )
        placement = Placement(layers=layers)
        metrics = self._metrics_from(batch, placement, log, self._accuracy_of(table, batch))
        return BatchOutcome(table, placement, log, metrics)

    def _accuracy_of(self, table: HashTable, batch) -> float:
        if isinstance(self.params, SruParams):
            return evaluate_accuracy(table.assignment, batch.oracle_routing)
        return 1.0

    def _run_predicted(self, batch, table: HashTable) -> BatchOutcome:
        plan = self._plan(table)
        _, placement, log = apply_batch(self.state, table, plan)

        # Tokens execute on their true experts; a miss loads the expert first.
        true_layers = []
        for layer in range(table.num_layers):
            true_row = batch.oracle_routing[layer]
            resident = self.state.resident(layer)
            for expert in sorted(set(int(e) for e in true_row) - set(resident)):
                self.state.add_replica(layer, expert)
                log.record(LOAD, layer, expert, 0)
            slots = self.state.slots(layer)
            slot_index = {slot: i for i, slot in enumerate(slots)}
            cursor: dict[int, int] = {}
            token_to_slot = np.empty(true_row.shape[0], dtype=np.int64)
            for token in range(true_row.shape[0]):
                expert = int(true_row[token])
                ordinals = resident[expert]
                position = cursor.get(expert, 0)
                token_to_slot[token] = slot_index[(expert, ordinals[position % len(ordinals)])]
                cursor[expert] = position + 1
            true_layers.append(LayerPlacement(slots=slots, token_to_slot=token_to_slot))

        metrics = self._metrics_from(
            batch, Placement(true_layers), log, self._accuracy_of(table, batch)
        )
        return BatchOutcome(table, placement, log, metrics)

    def _metrics_from(self, batch, execution: Placement, log: TransferLog, accuracy: float) -> Metrics:
        latency = 0.0
        transfer_total = 0.0
        busy_total = 0.0
        slot_time = 0.0
        for layer, lp in enumerate(execution.layers):
            events = log.layer_events(layer)
            makespan, busy = simulate_layer(lp.token_to_slot, len(lp.slots), events, self.cost)
            latency += makespan
            transfer_total += sum(self.cost.event_cost(e.kind) for e in events)
            busy_total += busy
            slot_time += len(lp.slots) * makespan
        if latency <= 0 or slot_time <= 0:
            raise MetricError("batch latency is zero; set a positive t_compute")
        num_tokens = self.trace.shape.batch_size
        return Metrics(
            batch_latency=latency,
            throughput=num_tokens / latency,
            utilization=min(1.0, busy_total / slot_time),
            stall_time=0.0,
            transfer_time=transfer_total,
            busy_time=busy_total,
            slot_time=slot_time,
            num_tokens=num_tokens,
            prediction_accuracy=accuracy,
        )


@dataclass
class StrategyResult:
    strategy: str
    per_batch: list[Metrics]
    aggregate: Metrics


def aggregate_metrics(per_batch: list[Metrics]) -> Metrics:
    """Totals over batches; utilization is time-weighted by slot time."""
    if not per_batch:
        raise MetricError("cannot aggregate zero batches")
    latency = sum(m.batch_latency + m.stall_time for m in per_batch)
    busy = sum(m.busy_time for m in per_batch)
    slot_time = sum(m.slot_time for m in per_batch)
    tokens = sum(m.num_tokens for m in per_batch)
    if latency <= 0 or slot_time <= 0:
        raise MetricError("aggregate latency must be positive")
    return Metrics(
        batch_latency=latency,
        throughput=tokens / latency,
        utilization=min(1.0, busy / slot_time),
        stall_time=sum(m.stall_time for m in per_batch),
        transfer_time=sum(m.transfer_time for m in per_batch),
        busy_time=busy,
        slot_time=slot_time,
        num_tokens=tokens,
        prediction_accuracy=float(np.mean([m.prediction_accuracy for m in per_batch])),
    )


def simulate_strategy(trace, strategy: str, capacity: int, params=ORACLE_PREDICTOR,
                      cost: CostModel | None = None) -> StrategyResult:
    """Run every batch of a trace under one residency strategy."""
    runner = BatchRunner(trace, strategy, capacity, params, cost)
    per_batch = [runner.run_batch(batch).metrics for batch in trace.batches]
    return StrategyResult(runner.strategy, per_batch, aggregate_metrics(per_batch))

"""Cost model arithmetic and strategy-level simulation."""

import numpy as np
import pytest

from moesim import (
    CostModel,
    MetricError,
    ModelShape,
    generate_hot_trace,
    generate_trace,
    simulate_layer,
    simulate_strategy,
    utilization,
)
from moesim.placement import TransferEvent
from moesim.predictor import init_params
from moesim.simulator import DISTINCT_ONLY, REPLICATED, RESIDENT_ALL, BatchRunner

ZERO_TRANSFER = CostModel(t_compute=1.0, t_load=0.0, t_replicate=0.0, t_offload=0.0)


class TestSimulateLayer:
    def test_two_slots_of_32(self):
        token_map = np.repeat([0, 1], 32)
        makespan, busy = simulate_layer(token_map, 2, [], CostModel())
        assert makespan == 32.0
        assert busy == 64.0

    def test_one_slot_per_token(self):
        makespan, busy = simulate_layer(np.arange(64), 64, [], CostModel())
        assert makespan == 1.0
        assert busy == 64.0

    def test_single_token_costs_t_compute(self):
        makespan, busy = simulate_layer(np.array([0]), 1, [], CostModel(t_compute=2.5))
        assert makespan == 2.5
        assert busy == 2.5

    def test_transfers_serialize_before_compute(self):
        events = [
            TransferEvent("load", 0, 0, 0),
            TransferEvent("replicate", 0, 0, 1),
            TransferEvent("offload", 0, 3, 0),
        ]
        makespan, _ = simulate_layer(np.array([0, 0]), 2, events, CostModel(1, 10, 2, 5))
        assert makespan == 17.0 + 2.0

    def test_empty_map_rejected(self):
        with pytest.raises(Exception):
            simulate_layer(np.array([], dtype=np.int64), 1, [], CostModel())


class TestUtilization:
    def test_resident_all_worked_example(self):
        assert utilization(64.0, 64, 32.0) == pytest.approx(0.03125)

    def test_fully_busy_two_slots(self):
        assert utilization(64.0, 2, 32.0) == 1.0

    def test_fully_replicated(self):
        assert utilization(64.0, 64, 1.0) == 1.0

    def test_zero_makespan_is_an_error(self):
        with pytest.raises(MetricError):
            utilization(1.0, 1, 0.0)


@pytest.fixture(scope="module")
def two_hot_trace():
    shape = ModelShape(num_layers=1, experts_per_layer=64, d_model=32, batch_size=64)
    return generate_hot_trace(shape, num_batches=5, num_hot=2, seed=13)


class TestSimulateStrategy:
    def test_all_distinct_trace_makes_replication_a_no_op(self):
        shape = ModelShape(num_layers=2, experts_per_layer=8, d_model=16, batch_size=8)
        trace = generate_hot_trace(shape, num_batches=3, num_hot=8, seed=4)
        distinct = simulate_strategy(trace, DISTINCT_ONLY, 8, cost=ZERO_TRANSFER)
        replicated = simulate_strategy(trace, REPLICATED, 8, cost=ZERO_TRANSFER)
        for a, b in zip(distinct.per_batch, replicated.per_batch):
            assert a.batch_latency == b.batch_latency
            assert a.utilization == b.utilization
            assert a.slot_time == b.slot_time

    def test_two_hot_utilization_ordering(self, two_hot_trace):
        # Frozen from the cost formulas: replicated 1.0, distinct-only with a
        # C-slot denominator 0.25 at C=8, resident-all 64/(64*32).
        replicated = simulate_strategy(two_hot_trace, REPLICATED, 8, cost=ZERO_TRANSFER)
        distinct = simulate_strategy(two_hot_trace, DISTINCT_ONLY, 8, cost=ZERO_TRANSFER)
        resident = simulate_strategy(two_hot_trace, RESIDENT_ALL, 8, cost=ZERO_TRANSFER)
        assert replicated.aggregate.utilization == 1.0
        total_makespan = sum(m.batch_latency for m in distinct.per_batch)
        distinct_c_denominator = distinct.aggregate.busy_time / (8 * total_makespan)
        assert distinct_c_denominator == pytest.approx(0.25)
        assert resident.aggregate.utilization == pytest.approx(0.03125)
        assert replicated.aggregate.utilization > distinct_c_denominator
        assert distinct_c_denominator > resident.aggregate.utilization

    def test_two_hot_makespans(self, two_hot_trace):
        resident = simulate_strategy(two_hot_trace, RESIDENT_ALL, 64, cost=ZERO_TRANSFER)
        replicated = simulate_strategy(two_hot_trace, REPLICATED, 64, cost=ZERO_TRANSFER)
        distinct = simulate_strategy(two_hot_trace, DISTINCT_ONLY, 64, cost=ZERO_TRANSFER)
        assert all(m.batch_latency == 32.0 for m in resident.per_batch)
        assert all(m.batch_latency == 32.0 for m in distinct.per_batch)
        assert all(m.batch_latency == 1.0 for m in replicated.per_batch)

    def test_work_conservation_across_strategies(self):
        shape = ModelShape(num_layers=2, experts_per_layer=8, d_model=16, batch_size=16)
        trace = generate_trace(shape, num_batches=4, skew=1.2, seed=6)
        busies = {
            strategy: simulate_strategy(trace, strategy, 8).aggregate.busy_time
            for strategy in (RESIDENT_ALL, DISTINCT_ONLY, REPLICATED)
        }
        assert len(set(busies.values())) == 1

    def test_warm_replicated_run_has_no_transfers_after_first_batch(self, two_hot_trace):
        result = simulate_strategy(two_hot_trace, REPLICATED, 64, cost=CostModel())
        assert result.per_batch[0].transfer_time > 0
        assert all(m.transfer_time == 0 for m in result.per_batch[1:])

    def test_speedup_versus_resident_all(self, two_hot_trace):
        light = CostModel(t_compute=1.0, t_load=1.0, t_replicate=0.1, t_offload=0.1)
        resident = simulate_strategy(two_hot_trace, RESIDENT_ALL, 64, cost=light)
        replicated = simulate_strategy(two_hot_trace, REPLICATED, 64, cost=light)
        assert replicated.aggregate.batch_latency <= resident.aggregate.batch_latency / 3

    def test_mispredictions_charge_corrective_loads(self, small_trace):
        shape = small_trace.shape
        untrained = init_params(
            shape.num_layers, shape.experts_per_layer, shape.d_model, num_sru_layers=2, seed=0
        )
        cost = CostModel(t_compute=1.0, t_load=5.0, t_replicate=0.0, t_offload=0.0)
        predicted = simulate_strategy(small_trace, DISTINCT_ONLY, 4, params=untrained, cost=cost)
        oracle = simulate_strategy(small_trace, DISTINCT_ONLY, 4, params="oracle", cost=cost)
        assert predicted.aggregate.prediction_accuracy < 1.0
        assert oracle.aggregate.prediction_accuracy == 1.0
        # Misses keep charging loads in the steady state; the oracle run does not.
        assert (
            sum(m.transfer_time for m in predicted.per_batch[1:])
            > sum(m.transfer_time for m in oracle.per_batch[1:])
        )

    def test_determinism(self, small_trace):
        a = simulate_strategy(small_trace, REPLICATED, 6)
        b = simulate_strategy(small_trace, REPLICATED, 6)
        for x, y in zip(a.per_batch, b.per_batch):
            assert x == y

    def test_resident_all_ignores_capacity_argument(self, two_hot_trace):
        narrow = simulate_strategy(two_hot_trace, RESIDENT_ALL, 2, cost=ZERO_TRANSFER)
        wide = simulate_strategy(two_hot_trace, RESIDENT_ALL, 64, cost=ZERO_TRANSFER)
        assert narrow.aggregate == wide.aggregate


class TestBatchRunner:
    def test_rejects_unknown_strategy(self, small_trace):
        with pytest.raises(Exception):
            BatchRunner(small_trace, "hybrid", 4)

    def test_rejects_bad_params(self, small_trace):
        runner = BatchRunner(small_trace, DISTINCT_ONLY, 4, params="bogus")
        with pytest.raises(Exception):
            runner.build_table(small_trace.batches[0])

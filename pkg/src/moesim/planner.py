"""Capacity capping: turn per-expert replica demand into feasible counts.

When the total demand of a layer fits in the device there is nothing to cap.
Otherwise every distinct expert keeps one replica, the leftover slots are split
evenly (floor) across experts whose demand is not yet met, and any remainder
goes one slot at a time to the expert with the largest unmet demand, ties
broken toward the lower expert index. Counts never exceed demand.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InfeasibleCapacityError
from .predictor import HashTable
from .validation import check_positive


@dataclass
class ReplicaPlan:
    """Capped replica counts per (layer, expert); sum per layer <= capacity."""

    capacity: int
    layers: list[dict[int, int]]


def demand_counts(table: HashTable, layer: int) -> dict[int, int]:
    """Histogram of the table's layer row: expert -> number of assigned tokens."""
    if layer < 0 or layer >= table.num_layers:
        raise ConfigurationError(f"layer {layer} outside [0, {table.num_layers})")
    row = table.assignment[layer]
    experts, counts = np.unique(row, return_counts=True)
    return {int(e): int(c) for e, c in zip(experts, counts)}


def cap_replicas(demand: dict[int, int], capacity: int) -> dict[int, int]:
    """Cap one layer's demand to ``capacity`` total replicas.

    Raises InfeasibleCapacityError when even one replica per distinct expert
    does not fit; the placement layer owns the distinct-only fallback.
    """
    check_positive("capacity", capacity)
    experts = sorted(demand)
    if not experts:
        return {}
    if any(demand[e] < 1 for e in experts):
        raise InfeasibleCapacityError("demand counts must be >= 1")

    total = sum(demand[e] for e in experts)
    if total <= capacity:
        return {e: demand[e] for e in experts}
    if len(experts) > capacity:
        raise InfeasibleCapacityError(
            f"{len(experts)} distinct experts exceed capacity {capacity}"
        )

    # Spare slots are granted one per expert per round (lowest count first,
    # larger unmet demand breaking count ties, then lower index). Complete
    # rounds give every unmet expert floor(spare / #unmet) extras and the
    # remainder walks the experts in decreasing order of unmet demand; the
    # grant sequence does not depend on the capacity, so raising the capacity
    # only extends it and counts grow monotonically.
    counts = {e: 1 for e in experts}
    spare = capacity - len(experts)
    while spare > 0:
        candidates = [e for e in experts if counts[e] < demand[e]]
        if not candidates:
            break
        best = min(candidates, key=lambda e: (counts[e], -(demand[e] - counts[e]), e))
        counts[best] += 1
        spare -= 1
    return counts


def plan_all_layers(table: HashTable, capacity: int) -> ReplicaPlan:
    """Apply cap_replicas to every layer; errors identify the failing layer."""
    check_positive("capacity", capacity)
    layers = []
    for layer in range(table.num_layers):
        demand = demand_counts(table, layer)
        try:
            layers.append(cap_replicas(demand, capacity))
        except InfeasibleCapacityError as exc:
            raise InfeasibleCapacityError(str(exc), layer=layer) from exc
    return ReplicaPlan(capacity=capacity, layers=layers)

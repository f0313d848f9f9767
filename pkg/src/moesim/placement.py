"""Per-layer expert residency: load, replicate within caps, offload, remap.

The device keeps replica slots warm across batches. For each layer of a new
hash table we first reclaim replicas above the expert's new cap, then offload
every resident expert the table no longer mentions, and only then walk tokens
in position order: the first token of a non-resident expert loads replica 0,
later tokens append fresh replicas while the cap allows, and once the cap is
reached tokens round-robin over the expert's existing replicas. Infeasible
caps degrade to one replica per demanded expert and flag the layer.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .planner import ReplicaPlan
from .predictor import HashTable
from .router_oracle import LayerPlacement, Placement
from .validation import check_positive

LOAD = "load"
REPLICATE = "replicate"
OFFLOAD = "offload"


@dataclass(frozen=True)
class TransferEvent:
    kind: str
    layer: int
    expert: int
    ordinal: int


@dataclass
class TransferLog:
    """Ordered transfer events plus the layers that needed the distinct-only fallback."""

    events: list[TransferEvent] = field(default_factory=list)
    fallback_layers: list[int] = field(default_factory=list)

    def record(self, kind: str, layer: int, expert: int, ordinal: int) -> None:
        self.events.append(TransferEvent(kind, layer, expert, ordinal))

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e.kind == kind)

    def layer_events(self, layer: int) -> list[TransferEvent]:
        return [e for e in self.events if e.layer == layer]

    def extend(self, other: "TransferLog") -> None:
        self.events.extend(other.events)
        self.fallback_layers.extend(other.fallback_layers)

    def to_csv_rows(self):
        for seq, e in enumerate(self.events):
            yield {
                "event": e.kind,
                "layer": e.layer,
                "expert": e.expert,
                "ordinal": e.ordinal,
                "sequence": seq,
            }


class DeviceState:
    """Resident replica slots per layer, capped at ``capacity`` slots each."""

    def __init__(self, num_layers: int, capacity: int):
        self.num_layers = check_positive("num_layers", num_layers)
        self.capacity = check_positive("capacity", capacity)
        # layer -> expert -> sorted list of resident replica ordinals
        self._resident: list[dict[int, list[int]]] = [{} for _ in range(num_layers)]

    def resident(self, layer: int) -> dict[int, list[int]]:
        return self._resident[layer]

    def resident_slot_count(self, layer: int) -> int:
        return sum(len(ords) for ords in self._resident[layer].values())

    def slots(self, layer: int) -> list[tuple[int, int]]:
        """Resident slots in deterministic (expert, ordinal) order."""
        return sorted(
            (expert, ordinal)
            for expert, ordinals in self._resident[layer].items()
            for ordinal in ordinals
        )

    def add_replica(self, layer: int, expert: int) -> int:
        ordinals = self._resident[layer].setdefault(expert, [])
        ordinal = ordinals[-1] + 1 if ordinals else 0
        ordinals.append(ordinal)
        return ordinal

    def drop_replica(self, layer: int, expert: int) -> int:
        ordinals = self._resident[layer][expert]
        ordinal = ordinals.pop()
        if not ordinals:
            del self._resident[layer][expert]
        return ordinal


def _layer_caps(plan: ReplicaPlan, layer: int) -> dict[int, int]:
    if layer >= len(plan.layers):
        raise ConfigurationError(f"plan covers {len(plan.layers)} layers, needed layer {layer}")
    return plan.layers[layer]


def apply_layer(state: DeviceState, table: HashTable, plan: ReplicaPlan, layer: int):
    """Place one layer of a hash table; returns (state, token_to_slot, TransferLog).

    The device state is updated in place. The returned token map indexes into
    ``state.slots(layer)`` taken after placement.
    """
    row = table.assignment[layer]
    demanded: dict[int, int] = {}
    for e in row:
        demanded[int(e)] = demanded.get(int(e), 0) + 1

    log = TransferLog()
    caps = _layer_caps(plan, layer)
    feasible = (
        all(caps.get(e, 0) >= 1 for e in demanded)
        and sum(caps.values()) <= state.capacity
        and plan.capacity <= state.capacity
    )
    if not feasible:
        caps = {e: 1 for e in demanded}
        log.fallback_layers.append(layer)

    resident = state.resident(layer)
    # Reclaim replicas a previous batch left above the new cap.
    for expert in sorted(resident):
        if expert not in demanded or expert not in caps:
            continue  # fully offloaded below
        while len(resident.get(expert, ())) > caps[expert]:
            log.record(OFFLOAD, layer, expert, state.drop_replica(layer, expert))
    # Offload every resident expert the table does not mention.
    for expert in sorted(set(resident) - set(demanded)):
        while expert in resident:
            log.record(OFFLOAD, layer, expert, state.drop_replica(layer, expert))

    # Token walk: load on first touch, replicate under cap, then round-robin.
    cursor: dict[int, int] = {}
    assigned: list[tuple[int, int]] = []
    for token in range(row.shape[0]):
        expert = int(row[token])
        ordinals = resident.get(expert)
        if not ordinals:
            state.add_replica(layer, expert)
            log.record(LOAD, layer, expert, 0)
            assigned.append((expert, 0))
        elif len(ordinals) < caps[expert]:
            ordinal = state.add_replica(layer, expert)
            log.record(REPLICATE, layer, expert, ordinal)
            assigned.append((expert, ordinal))
        else:
            position = cursor.get(expert, 0)
            assigned.append((expert, ordinals[position % len(ordinals)]))
            cursor[expert] = position + 1

    slots = state.slots(layer)
    slot_index = {slot: i for i, slot in enumerate(slots)}
    token_to_slot = np.array([slot_index[slot] for slot in assigned], dtype=np.int64)
    return state, token_to_slot, log


def apply_batch(state: DeviceState, table: HashTable, plan: ReplicaPlan):
    """Fold apply_layer over every layer; returns (state, Placement, TransferLog)."""
    if table.num_layers != state.num_layers:
        raise ConfigurationError(
            f"table has {table.num_layers} layers, device has {state.num_layers}"
        )
    layers = []
    log = TransferLog()
    for layer in range(table.num_layers):
        _, token_to_slot, layer_log = apply_layer(state, table, plan, layer)
        log.extend(layer_log)
        layers.append(LayerPlacement(slots=state.slots(layer), token_to_slot=token_to_slot))
    return state, Placement(layers=layers), log

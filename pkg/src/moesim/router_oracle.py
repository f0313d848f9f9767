"""Miniature top-1 MoE forward pass used as routing ground truth.

Each layer holds a bias-free softmax router and E relu FFN experts; the chosen
expert's output is added residually to the token embedding before the next
layer routes. Replicas are exact weight copies, so running a batch under any
placement that respects the model's own routing is bitwise identical to the
dense baseline.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, PlacementError, TraceParseError
from .validation import check_finite

DENSE_BASELINE = "dense-baseline"

PARAMS_FORMAT_VERSION = "1"


@dataclass
class ToyMoeParams:
    """Router and expert weights for every layer.

    router_weights: (L, E, d_model); expert_u: (L, E, d_ff, d_model);
    expert_v: (L, E, d_model, d_ff). All float32.
    """

    router_weights: np.ndarray
    expert_u: np.ndarray
    expert_v: np.ndarray

    def __post_init__(self):
        if self.router_weights.ndim != 3 or self.expert_u.ndim != 4 or self.expert_v.ndim != 4:
            raise ConfigurationError("parameter tensors have wrong rank")
        layers, experts, d_model = self.router_weights.shape
        d_ff = self.expert_u.shape[2]
        if self.expert_u.shape != (layers, experts, d_ff, d_model):
            raise ConfigurationError(f"expert_u shape {self.expert_u.shape} inconsistent")
        if self.expert_v.shape != (layers, experts, d_model, d_ff):
            raise ConfigurationError(f"expert_v shape {self.expert_v.shape} inconsistent")
        check_finite("router_weights", self.router_weights)
        check_finite("expert_u", self.expert_u)
        check_finite("expert_v", self.expert_v)

    @property
    def num_layers(self) -> int:
        return self.router_weights.shape[0]

    @property
    def num_experts(self) -> int:
        return self.router_weights.shape[1]

    @property
    def d_model(self) -> int:
        return self.router_weights.shape[2]

    @property
    def d_ff(self) -> int:
        return self.expert_u.shape[2]


@dataclass
class LayerPlacement:
    """Resident replica slots for one layer plus the token-to-slot assignment."""

    slots: list[tuple[int, int]]  # (logical expert, replica ordinal)
    token_to_slot: np.ndarray  # (batch_size,) indices into slots


@dataclass
class Placement:
    layers: list[LayerPlacement]


def random_params(shape, d_ff: int | None = None, seed: int = 0) -> ToyMoeParams:
    """Fully random toy model for a given ModelShape (testing and demos)."""
    if d_ff is None:
        d_ff = shape.d_model
    rng = np.random.default_rng(seed)
    layers, experts, d_model = shape.num_layers, shape.experts_per_layer, shape.d_model
    return ToyMoeParams(
        router_weights=rng.normal(size=(layers, experts, d_model)).astype(np.float32),
        expert_u=rng.normal(0.0, 1.0 / np.sqrt(d_model), size=(layers, experts, d_ff, d_model)).astype(np.float32),
        expert_v=rng.normal(0.0, 1.0 / np.sqrt(d_ff), size=(layers, experts, d_model, d_ff)).astype(np.float32),
    )


def route_top1(layer: int, embedding, params: ToyMoeParams) -> int:
    """Argmax of the layer's router logits; ties break toward the lower index."""
    if layer < 0 or layer >= params.num_layers:
        raise ConfigurationError(f"layer {layer} outside [0, {params.num_layers})")
    emb = check_finite("embedding", embedding).astype(np.float64)
    if emb.shape != (params.d_model,):
        raise ConfigurationError(f"embedding shape {emb.shape} != ({params.d_model},)")
    logits = params.router_weights[layer].astype(np.float64) @ emb
    return int(np.argmax(logits))


def expert_forward(embedding, u, v) -> np.ndarray:
    """One expert FFN: v @ relu(u @ x)."""
    emb = check_finite("embedding", embedding)
    u = np.asarray(u)
    v = np.asarray(v)
    if u.ndim != 2 or v.ndim != 2 or u.shape[1] != emb.shape[-1] or v.shape[1] != u.shape[0]:
        raise ConfigurationError(
            f"incompatible expert shapes u={u.shape} v={v.shape} x={emb.shape}"
        )
    out = v @ np.maximum(u @ emb, 0.0)
    return check_finite("expert output", out)


def _batch_embeddings(batch) -> np.ndarray:
    emb = getattr(batch, "embeddings", batch)
    return check_finite("embeddings", emb)


def _run_layers(embeddings: np.ndarray, params: ToyMoeParams, choose):
    """Shared forward loop; ``choose(layer, token, x)`` picks the logical expert.

    Tokens are processed one at a time with identical array operations in every
    mode, which is what makes baseline and replicated runs bitwise comparable.
    """
    stream = embeddings.copy()
    chosen = np.zeros((params.num_layers, stream.shape[0]), dtype=np.int64)
    for layer in range(params.num_layers):
        for token in range(stream.shape[0]):
            expert = choose(layer, token, stream[token])
            chosen[layer, token] = expert
            delta = expert_forward(
                stream[token], params.expert_u[layer, expert], params.expert_v[layer, expert]
            )
            stream[token] = stream[token] + delta
    return stream, chosen


def oracle_route_batch(batch, params: ToyMoeParams) -> np.ndarray:
    """(L, B) expert indices the dense model itself picks, layer by layer."""
    embeddings = _batch_embeddings(batch)
    _, chosen = _run_layers(embeddings, params, lambda l, t, x: route_top1(l, x, params))
    return chosen


def moe_forward(batch, params: ToyMoeParams, placement=DENSE_BASELINE) -> np.ndarray:
    """Run the toy MoE over a batch and return the (B, d_model) final stream.

    With ``placement="dense-baseline"`` every layer routes via route_top1 with
    all experts available. With a Placement, each token uses the logical expert
    of its assigned slot; replicas are exact copies so outputs match the
    baseline bit for bit whenever the placement follows the model's routing.
    """
    embeddings = _batch_embeddings(batch)
    if isinstance(placement, str):
        if placement != DENSE_BASELINE:
            raise ConfigurationError(f"unknown placement mode {placement!r}")
        out, _ = _run_layers(embeddings, params, lambda l, t, x: route_top1(l, x, params))
        return out

    if len(placement.layers) != params.num_layers:
        raise PlacementError(
            f"placement covers {len(placement.layers)} layers, model has {params.num_layers}"
        )

    def choose(layer: int, token: int, _x) -> int:
        lp = placement.layers[layer]
        if token >= lp.token_to_slot.shape[0]:
            raise PlacementError(f"layer {layer}: no slot assigned to token {token}")
        slot = int(lp.token_to_slot[token])
        if slot < 0 or slot >= len(lp.slots):
            raise PlacementError(f"layer {layer}: token {token} mapped to missing slot {slot}")
        expert = lp.slots[slot][0]
        if expert < 0 or expert >= params.num_experts:
            raise PlacementError(f"layer {layer}: slot {slot} holds invalid expert {expert}")
        return expert

    out, _ = _run_layers(embeddings, params, choose)
    return out


def _format_f32(value) -> str:
    return f"{float(value):.9g}"


def save_params(params: ToyMoeParams, path) -> None:
    """Write toy model weights as text, one tensor row per line (float32, 9 digits)."""
    layers, experts, d_model, d_ff = (
        params.num_layers,
        params.num_experts,
        params.d_model,
        params.d_ff,
    )
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(
            f"moesim-moe-params v{PARAMS_FORMAT_VERSION} layers={layers} "
            f"experts={experts} d_model={d_model} d_ff={d_ff}\n"
        )
        for name, tensor in (
            ("router", params.router_weights),
            ("expert_u", params.expert_u),
            ("expert_v", params.expert_v),
        ):
            flat = tensor.reshape(-1, tensor.shape[-1])
            for row in flat:
                handle.write(name + " " + " ".join(_format_f32(v) for v in row) + "\n")


def load_params(path) -> ToyMoeParams:
    with open(path, encoding="utf-8") as handle:
        header = handle.readline().split()
        if len(header) < 2 or header[0] != "moesim-moe-params":
            raise TraceParseError("not a moesim-moe-params file", line=1)
        try:
            fields = dict(part.split("=", 1) for part in header[2:])
            layers = int(fields["layers"])
            experts = int(fields["experts"])
            d_model = int(fields["d_model"])
            d_ff = int(fields["d_ff"])
        except (ValueError, KeyError) as exc:
            raise TraceParseError(f"bad header: {exc}", line=1) from exc

        specs = [
            ("router", (layers, experts, d_model), d_model),
            ("expert_u", (layers, experts, d_ff, d_model), d_model),
            ("expert_v", (layers, experts, d_model, d_ff), d_ff),
        ]
        tensors = {}
        lineno = 1
        for name, shape, width in specs:
            rows = int(np.prod(shape[:-1]))
            data = np.zeros((rows, width), dtype=np.float32)
            for i in range(rows):
                lineno += 1
                raw = handle.readline()
                if not raw:
                    raise TraceParseError(f"truncated file while reading {name}", line=lineno)
                tokens = raw.split()
                if len(tokens) != width + 1 or tokens[0] != name:
                    raise TraceParseError(f"expected a {name} row of {width} values", line=lineno)
                try:
                    data[i] = [float(tok) for tok in tokens[1:]]
                except ValueError as exc:
                    raise TraceParseError(f"bad float: {exc}", line=lineno) from exc
            tensors[name] = data.reshape(shape)
        if handle.readline():
            raise TraceParseError("trailing data after parameter rows", line=lineno + 1)
    return ToyMoeParams(
        router_weights=tensors["router"],
        expert_u=tensors["expert_u"],
        expert_v=tensors["expert_v"],
    )

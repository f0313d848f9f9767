"""Synthetic skewed routing traces with oracle-consistent token embeddings.

A trace fixes, per batch, a matrix of token embeddings plus the expert each
token is routed to in every MoE layer. Embeddings are sampled near per-expert
centroids so that the toy router in :mod:`moesim.router_oracle` reproduces the
stored assignments exactly; popularity across experts follows a Zipf law over
a seeded permutation, which is what makes the load imbalanced.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, TraceParseError, ValidationError
from .validation import check_finite, check_positive

TRACE_FORMAT_VERSION = "1"

# Logit gap the winning expert must keep over the runner-up. Large enough to
# survive the float32 round trip of the trace file.
ROUTING_MARGIN = 0.02

_CENTROID_COS_CAPS = (0.8, 0.95)
_CENTROID_DRAWS = 500
_EMBEDDING_DRAWS = 100


@dataclass(frozen=True)
class ModelShape:
    """Dimensions of the MoE model a trace is generated for."""

    num_layers: int
    experts_per_layer: int
    d_model: int
    batch_size: int = 64

    def __post_init__(self):
        check_positive("num_layers", self.num_layers)
        check_positive("experts_per_layer", self.experts_per_layer, minimum=2)
        check_positive("d_model", self.d_model, minimum=2)
        check_positive("batch_size", self.batch_size)


@dataclass
class Batch:
    """One batch of tokens: embeddings plus per-layer oracle expert indices."""

    index: int
    embeddings: np.ndarray  # (batch_size, d_model) float32
    oracle_routing: np.ndarray  # (num_layers, batch_size) int64

    def validate(self, shape: ModelShape) -> None:
        if self.embeddings.shape != (shape.batch_size, shape.d_model):
            raise ValidationError(
                f"batch {self.index}: embeddings shape {self.embeddings.shape} "
                f"does not match {(shape.batch_size, shape.d_model)}"
            )
        if self.oracle_routing.shape != (shape.num_layers, shape.batch_size):
            raise ValidationError(
                f"batch {self.index}: oracle_routing shape {self.oracle_routing.shape} "
                f"does not match {(shape.num_layers, shape.batch_size)}"
            )
        check_finite(f"batch {self.index} embeddings", self.embeddings)
        if self.oracle_routing.min() < 0 or self.oracle_routing.max() >= shape.experts_per_layer:
            raise ValidationError(
                f"batch {self.index}: expert index outside [0, {shape.experts_per_layer})"
            )

    def __eq__(self, other):
        if not isinstance(other, Batch):
            return NotImplemented
        return (
            self.index == other.index
            and self.embeddings.dtype == other.embeddings.dtype
            and self.embeddings.shape == other.embeddings.shape
            and self.embeddings.tobytes() == other.embeddings.tobytes()
            and np.array_equal(self.oracle_routing, other.oracle_routing)
        )


@dataclass
class RoutingTrace:
    """Ordered batches plus the generator settings recorded in the file header."""

    shape: ModelShape
    batches: list[Batch]
    skew: float = 0.0
    seed: int = 0
    hot_experts: int = 0

    def __post_init__(self):
        if not self.batches:
            raise ValidationError("a trace needs at least one batch")
        for batch in self.batches:
            batch.validate(self.shape)

    @property
    def num_batches(self) -> int:
        return len(self.batches)

    def __eq__(self, other):
        if not isinstance(other, RoutingTrace):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.skew == other.skew
            and self.seed == other.seed
            and self.hot_experts == other.hot_experts
            and self.batches == other.batches
        )


@dataclass
class _TraceGeometry:
    """Seeded construction shared by trace generation and the paired oracle model."""

    routing_dims: int
    centroids: np.ndarray  # (E, d_model) float32, zero outside the routing dims
    popularity_rank: np.ndarray  # rank[e] = Zipf rank of expert e
    layer_perms: np.ndarray  # (L, E), layer_perms[l][e0] = expert at layer l


def _sample_centroid_rows(num_experts: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Unit rows in R^k whose pairwise cosines stay below a cap.

    Bounded cosines keep the router margin reachable for every expert; the cap
    is relaxed once before giving up so crowded configurations still succeed
    when they are geometrically possible.
    """
    for cos_cap in _CENTROID_COS_CAPS:
        rows: list[np.ndarray] = []
        feasible = True
        for _ in range(num_experts):
            placed = False
            for _ in range(_CENTROID_DRAWS):
                v = rng.normal(size=k)
                norm = np.linalg.norm(v)
                if norm == 0.0:
                    continue
                v /= norm
                if all(float(np.dot(v, row)) <= cos_cap for row in rows):
                    rows.append(v)
                    placed = True
                    break
            if not placed:
                feasible = False
                break
        if feasible:
            return np.stack(rows)
    raise ConfigurationError(
        f"cannot place {num_experts} separable expert centroids in "
        f"{k} routing dimensions; increase d_model"
    )


def _build_geometry(shape: ModelShape, rng: np.random.Generator) -> _TraceGeometry:
    k = max(1, shape.d_model // 2)
    rows = _sample_centroid_rows(shape.experts_per_layer, k, rng)
    centroids = np.zeros((shape.experts_per_layer, shape.d_model), dtype=np.float32)
    centroids[:, :k] = rows.astype(np.float32)

    popularity_rank = np.empty(shape.experts_per_layer, dtype=np.int64)
    popularity_rank[rng.permutation(shape.experts_per_layer)] = np.arange(shape.experts_per_layer)

    perms = np.empty((shape.num_layers, shape.experts_per_layer), dtype=np.int64)
    perms[0] = np.arange(shape.experts_per_layer)
    for layer in range(1, shape.num_layers):
        perms[layer] = rng.permutation(shape.experts_per_layer)
    return _TraceGeometry(k, centroids, popularity_rank, perms)


def zipf_probabilities(num_experts: int, skew: float, popularity_rank: np.ndarray) -> np.ndarray:
    """Zipf(skew) selection probabilities, expert e weighted by 1/(rank_e+1)^skew."""
    weights = 1.0 / (popularity_rank.astype(np.float64) + 1.0) ** skew
    return weights / weights.sum()


def _sample_margin_embeddings(
    geometry: _TraceGeometry,
    layer0_experts: np.ndarray,
    rng: np.random.Generator,
    noise_scale: float,
) -> np.ndarray:
    """Centroid + Gaussian noise, resampled until the router margin is positive.

    The margin is checked on the float32-rounded candidate against the float32
    centroids, i.e. exactly the arithmetic route_top1 will see after a file
    round trip.
    """
    k = geometry.routing_dims
    routing_rows = geometry.centroids[:, :k].astype(np.float64)
    d_model = geometry.centroids.shape[1]
    base = geometry.centroids.astype(np.float64)[layer0_experts]

    out = np.zeros((layer0_experts.size, d_model), dtype=np.float32)
    pending = np.arange(layer0_experts.size)
    for _ in range(_EMBEDDING_DRAWS):
        cand = base[pending] + rng.normal(0.0, noise_scale, size=(pending.size, d_model))
        cand32 = cand.astype(np.float32)
        logits = cand32[:, :k].astype(np.float64) @ routing_rows.T
        idx = np.arange(pending.size)
        own = logits[idx, layer0_experts[pending]].copy()
        logits[idx, layer0_experts[pending]] = -np.inf
        ok = own - logits.max(axis=1) >= ROUTING_MARGIN
        out[pending[ok]] = cand32[ok]
        pending = pending[~ok]
        if pending.size == 0:
            return out
    raise ConfigurationError(
        "could not sample margin-positive embeddings; lower noise_scale or add experts headroom"
    )


def _assemble_batches(
    geometry: _TraceGeometry,
    layer0_choices: list[np.ndarray],
    rng: np.random.Generator,
    noise_scale: float,
) -> list[Batch]:
    batches = []
    for index, e0 in enumerate(layer0_choices):
        embeddings = _sample_margin_embeddings(geometry, e0, rng, noise_scale)
        oracle = geometry.layer_perms[:, e0]
        batches.append(Batch(index, embeddings, oracle))
    return batches


def generate_trace(
    shape: ModelShape,
    num_batches: int,
    skew: float,
    seed: int,
    noise_scale: float = 0.1,
) -> RoutingTrace:
    """Generate a Zipf-skewed routing trace.

    Deterministic for a fixed seed. Layer-0 experts are drawn from a Zipf(skew)
    law over a seeded permutation of experts; deeper layers apply a fixed seeded
    permutation to the layer-0 choice, giving the predictor cross-layer signal.
    """
    check_positive("num_batches", num_batches)
    if skew < 0:
        raise ConfigurationError(f"skew must be >= 0, got {skew}")
    rng = np.random.default_rng(seed)
    geometry = _build_geometry(shape, rng)
    probs = zipf_probabilities(shape.experts_per_layer, skew, geometry.popularity_rank)
    choices = [
        rng.choice(shape.experts_per_layer, size=shape.batch_size, p=probs)
        for _ in range(num_batches)
    ]
    batches = _assemble_batches(geometry, choices, rng, noise_scale)
    return RoutingTrace(shape, batches, skew=float(skew), seed=int(seed))


def generate_hot_trace(
    shape: ModelShape,
    num_batches: int,
    num_hot: int,
    seed: int,
    noise_scale: float = 0.1,
) -> RoutingTrace:
    """Trace where every batch splits its tokens exactly evenly over ``num_hot`` experts.

    Models the motivating scenario of a 64-token batch landing on 2 of 64
    experts; the exact split keeps replica demand constant across batches so
    a warm device incurs no transfers.
    """
    check_positive("num_batches", num_batches)
    check_positive("num_hot", num_hot)
    if num_hot > shape.experts_per_layer:
        raise ConfigurationError("num_hot cannot exceed experts_per_layer")
    rng = np.random.default_rng(seed)
    geometry = _build_geometry(shape, rng)

    by_rank = np.argsort(geometry.popularity_rank)
    hot = by_rank[:num_hot]
    counts = np.full(num_hot, shape.batch_size // num_hot, dtype=np.int64)
    counts[: shape.batch_size % num_hot] += 1
    flat = np.repeat(hot, counts)
    choices = [flat[rng.permutation(shape.batch_size)] for _ in range(num_batches)]
    batches = _assemble_batches(geometry, choices, rng, noise_scale)
    return RoutingTrace(shape, batches, skew=0.0, seed=int(seed), hot_experts=int(num_hot))


def oracle_params_for_trace(trace: RoutingTrace, d_ff: int | None = None):
    """Toy MoE parameters whose router reproduces the trace's oracle routing.

    Router rows are the trace's centroids, permuted per layer the same way the
    assignments were. Expert FFNs write only into the non-routing coordinates,
    so the residual stream never disturbs routing decisions and
    ``route_top1(layer, embedding)`` matches ``oracle_routing`` exactly.
    """
    from .router_oracle import ToyMoeParams

    shape = trace.shape
    if d_ff is None:
        d_ff = shape.d_model
    rng = np.random.default_rng(trace.seed)
    geometry = _build_geometry(shape, rng)
    k = geometry.routing_dims

    layers, experts, d_model = shape.num_layers, shape.experts_per_layer, shape.d_model
    router = np.empty((layers, experts, d_model), dtype=np.float32)
    for layer in range(layers):
        router[layer, geometry.layer_perms[layer]] = geometry.centroids
    expert_u = rng.normal(0.0, 1.0 / np.sqrt(d_model), size=(layers, experts, d_ff, d_model))
    expert_v = rng.normal(0.0, 1.0 / np.sqrt(d_ff), size=(layers, experts, d_model, d_ff))
    expert_v[:, :, :k, :] = 0.0  # keep expert output out of the routing subspace
    return ToyMoeParams(
        router_weights=router,
        expert_u=expert_u.astype(np.float32),
        expert_v=expert_v.astype(np.float32),
    )


def _format_f32(value: np.float32) -> str:
    # 9 significant digits round-trip IEEE binary32 exactly.
    return f"{float(value):.9g}"


def _header_line(trace: RoutingTrace) -> str:
    s = trace.shape
    fields = [
        f"layers={s.num_layers}",
        f"experts={s.experts_per_layer}",
        f"d_model={s.d_model}",
        f"batch_size={s.batch_size}",
        f"num_batches={trace.num_batches}",
        f"skew={trace.skew!r}",
        f"seed={trace.seed}",
        f"hot_experts={trace.hot_experts}",
    ]
    return f"moesim-trace v{TRACE_FORMAT_VERSION} " + " ".join(fields)


def write_trace(trace: RoutingTrace, path) -> None:
    """Write a trace as line-delimited text; see read_trace for the format."""
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(_header_line(trace) + "\n")
        for batch in trace.batches:
            for pos in range(trace.shape.batch_size):
                experts = " ".join(str(e) for e in batch.oracle_routing[:, pos])
                floats = " ".join(_format_f32(v) for v in batch.embeddings[pos])
                handle.write(f"{batch.index} {pos} {experts} {floats}\n")


def _parse_header(line: str) -> dict:
    parts = line.split()
    if len(parts) < 2 or parts[0] != "moesim-trace" or parts[1] != f"v{TRACE_FORMAT_VERSION}":
        raise TraceParseError("not a moesim-trace v1 header", line=1)
    fields = {}
    for part in parts[2:]:
        key, sep, value = part.partition("=")
        if not sep:
            raise TraceParseError(f"malformed header field {part!r}", line=1)
        fields[key] = value
    required = ("layers", "experts", "d_model", "batch_size", "num_batches", "skew", "seed")
    missing = [key for key in required if key not in fields]
    if missing:
        raise TraceParseError(f"header missing fields: {', '.join(missing)}", line=1)
    return fields


def read_trace(path) -> RoutingTrace:
    """Parse a trace file written by write_trace.

    Format: one header line (``moesim-trace v1 key=value ...``) followed by one
    line per token holding ``batch position`` then L expert indices then
    d_model float32 embedding values (9 significant digits, exact round trip).
    Tokens must appear in (batch, position) order.
    """
    with open(path, encoding="utf-8") as handle:
        header = handle.readline()
        if not header.strip():
            raise TraceParseError("empty file", line=1)
        fields = _parse_header(header.strip())
        try:
            shape = ModelShape(
                num_layers=int(fields["layers"]),
                experts_per_layer=int(fields["experts"]),
                d_model=int(fields["d_model"]),
                batch_size=int(fields["batch_size"]),
            )
            num_batches = int(fields["num_batches"])
            skew = float(fields["skew"])
            seed = int(fields["seed"])
            hot_experts = int(fields.get("hot_experts", "0"))
        except ValueError as exc:
            raise TraceParseError(f"bad header value: {exc}", line=1) from exc

        layers, batch_size, d_model = shape.num_layers, shape.batch_size, shape.d_model
        embeddings = np.zeros((num_batches, batch_size, d_model), dtype=np.float32)
        routing = np.zeros((num_batches, layers, batch_size), dtype=np.int64)
        expected = [(b, p) for b in range(num_batches) for p in range(batch_size)]

        lineno = 1
        count = 0
        for raw in handle:
            lineno += 1
            if not raw.strip():
                raise TraceParseError("blank token line", line=lineno)
            tokens = raw.split()
            if len(tokens) != 2 + layers + d_model:
                raise TraceParseError(
                    f"expected {2 + layers + d_model} fields, found {len(tokens)}", line=lineno
                )
            if count >= len(expected):
                raise TraceParseError("more token lines than the header declares", line=lineno)
            try:
                batch_idx, pos = int(tokens[0]), int(tokens[1])
                experts = [int(tok) for tok in tokens[2 : 2 + layers]]
                values = [float(tok) for tok in tokens[2 + layers :]]
            except ValueError as exc:
                raise TraceParseError(f"bad field: {exc}", line=lineno) from exc
            if (batch_idx, pos) != expected[count]:
                raise TraceParseError(
                    f"token out of order: expected batch={expected[count][0]} "
                    f"position={expected[count][1]}, found batch={batch_idx} position={pos}",
                    line=lineno,
                )
            if any(e < 0 or e >= shape.experts_per_layer for e in experts):
                raise ValidationError(
                    f"line {lineno}: expert index outside [0, {shape.experts_per_layer})"
                )
            routing[batch_idx, :, pos] = experts
            embeddings[batch_idx, pos] = np.array(values, dtype=np.float32)
            count += 1

        if count != len(expected):
            raise TraceParseError(
                f"truncated file: expected {len(expected)} token lines, found {count}",
                line=lineno + 1,
            )

    batches = [Batch(b, embeddings[b], routing[b]) for b in range(num_batches)]
    return RoutingTrace(shape, batches, skew=skew, seed=seed, hot_experts=hot_experts)

"""SRU-based expert predictor and per-batch hash-table construction.

A stack of simple recurrent units runs over the token sequence of a batch; one
linear head per MoE layer turns the top hidden state into expert logits. At
inference the head logits go through sparsemax and the argmax becomes the
predicted expert; the per-expert counts of those assignments are the requested
replication counts. Training minimizes softmax cross-entropy against the
trace's oracle routing with plain mini-batch gradient descent (sparsemax is a
selection device, not the training loss, so gradients stay smooth).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericError, TraceParseError, TrainingError
from .validation import check_finite

DEFAULT_SRU_LAYERS = 10

SRU_PARAMS_FORMAT_VERSION = "1"


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


@dataclass
class SruLayerParams:
    """Weights of one SRU layer: w, w_f, w_r are (d, d); b_f, b_r are (d,)."""

    w: np.ndarray
    w_f: np.ndarray
    w_r: np.ndarray
    b_f: np.ndarray
    b_r: np.ndarray


@dataclass
class SruParams:
    """SRU trunk shared by all MoE layers plus one (E, d) head per MoE layer."""

    layers: list[SruLayerParams]
    heads: np.ndarray  # (num_moe_layers, E, d_model)

    @property
    def num_sru_layers(self) -> int:
        return len(self.layers)

    @property
    def num_moe_layers(self) -> int:
        return self.heads.shape[0]

    @property
    def num_experts(self) -> int:
        return self.heads.shape[1]

    @property
    def d_model(self) -> int:
        return self.heads.shape[2]

    def copy(self) -> "SruParams":
        return SruParams(
            layers=[
                SruLayerParams(l.w.copy(), l.w_f.copy(), l.w_r.copy(), l.b_f.copy(), l.b_r.copy())
                for l in self.layers
            ],
            heads=self.heads.copy(),
        )


@dataclass
class SruState:
    """Cell state per SRU layer; zeros at the start of every batch."""

    cells: np.ndarray  # (num_sru_layers, d_model)

    @classmethod
    def zeros(cls, num_sru_layers: int, d_model: int) -> "SruState":
        return cls(np.zeros((num_sru_layers, d_model)))


@dataclass
class HashTable:
    """Predicted (layer, token) -> expert map plus per-expert replica demand."""

    batch_index: int
    assignment: np.ndarray  # (num_moe_layers, batch_size) int64
    replica_counts: list[dict[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.assignment.ndim != 2:
            raise ConfigurationError("assignment must be (layers, tokens)")
        if self.assignment.size and self.assignment.min() < 0:
            raise ConfigurationError("assignment holds negative expert indices")
        expected = _histograms(self.assignment)
        if not self.replica_counts:
            self.replica_counts = expected
        elif self.replica_counts != expected:
            raise ConfigurationError("replica_counts do not match the assignment histogram")

    @classmethod
    def from_assignment(cls, batch_index: int, assignment) -> "HashTable":
        return cls(batch_index, np.asarray(assignment, dtype=np.int64))

    @property
    def num_layers(self) -> int:
        return self.assignment.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.assignment.shape[1]

    def __eq__(self, other):
        if not isinstance(other, HashTable):
            return NotImplemented
        return self.batch_index == other.batch_index and np.array_equal(
            self.assignment, other.assignment
        )


def _histograms(assignment: np.ndarray) -> list[dict[int, int]]:
    out = []
    for row in assignment:
        experts, counts = np.unique(row, return_counts=True)
        out.append({int(e): int(c) for e, c in zip(experts, counts)})
    return out


def init_params(
    num_moe_layers: int,
    num_experts: int,
    d_model: int,
    num_sru_layers: int = DEFAULT_SRU_LAYERS,
    seed: int = 0,
) -> SruParams:
    """Seeded uniform init in [-1/sqrt(d_model), +1/sqrt(d_model)] for every tensor."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d_model)

    def draw(*shape):
        return rng.uniform(-bound, bound, size=shape)

    layers = [
        SruLayerParams(
            w=draw(d_model, d_model),
            w_f=draw(d_model, d_model),
            w_r=draw(d_model, d_model),
            b_f=draw(d_model),
            b_r=draw(d_model),
        )
        for _ in range(num_sru_layers)
    ]
    return SruParams(layers=layers, heads=draw(num_moe_layers, num_experts, d_model))


def sru_cell(x_t, c_prev, layer: SruLayerParams):
    """One SRU step; returns (h_t, c_t) with g = tanh.

    x' = W x; f = sigmoid(W_f x + b_f); r = sigmoid(W_r x + b_r);
    c = f * c_prev + (1 - f) * x'; h = r * tanh(c) + (1 - r) * x.
    """
    x_t = check_finite("x_t", x_t).astype(np.float64)
    c_prev = check_finite("c_prev", c_prev).astype(np.float64)
    x_proj = layer.w @ x_t
    f_t = _sigmoid(layer.w_f @ x_t + layer.b_f)
    r_t = _sigmoid(layer.w_r @ x_t + layer.b_r)
    c_t = f_t * c_prev + (1.0 - f_t) * x_proj
    h_t = r_t * np.tanh(c_t) + (1.0 - r_t) * x_t
    if not (np.all(np.isfinite(h_t)) and np.all(np.isfinite(c_t))):
        raise NumericError("SRU cell produced non-finite state")
    return h_t, c_t


def sru_forward(embeddings, params: SruParams) -> np.ndarray:
    """Run the SRU stack over one token sequence; returns (T, d_model) hiddens.

    Tokens are consumed in position order; layer l+1 reads layer l's hidden
    sequence; every layer starts from a zero cell state.
    """
    x = check_finite("embeddings", embeddings).astype(np.float64)
    if x.ndim != 2:
        raise ConfigurationError("embeddings must be (tokens, d_model)")
    if x.shape[0] == 0:
        raise ConfigurationError("batch must contain at least one token")
    d_model = params.d_model
    if x.shape[1] != d_model:
        raise ConfigurationError(f"embedding width {x.shape[1]} != d_model {d_model}")
    for layer in params.layers:
        c_t = np.zeros(d_model)
        hidden = np.empty_like(x)
        for t in range(x.shape[0]):
            hidden[t], c_t = sru_cell(x[t], c_t, layer)
        x = hidden
    return x


def sparsemax(z) -> np.ndarray:
    """Euclidean projection of z onto the probability simplex (sorted threshold)."""
    z = check_finite("z", z).astype(np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ConfigurationError("sparsemax expects a nonempty 1-D vector")
    srt = np.sort(z)[::-1]
    cumulative = np.cumsum(srt)
    positions = np.arange(1, z.size + 1)
    support = 1.0 + positions * srt > cumulative
    k = int(positions[support][-1])
    tau = (cumulative[k - 1] - 1.0) / k
    return np.maximum(z - tau, 0.0)


def predict_batch(batch, params: SruParams) -> HashTable:
    """Predict per-layer expert assignments for a batch and count replica demand."""
    embeddings = getattr(batch, "embeddings", batch)
    index = int(getattr(batch, "index", 0))
    hidden = sru_forward(embeddings, params)
    num_tokens = hidden.shape[0]
    assignment = np.zeros((params.num_moe_layers, num_tokens), dtype=np.int64)
    for layer in range(params.num_moe_layers):
        logits = hidden @ params.heads[layer].T
        for token in range(num_tokens):
            assignment[layer, token] = int(np.argmax(sparsemax(logits[token])))
    return HashTable.from_assignment(index, assignment)


def evaluate_accuracy(predicted, oracle) -> float:
    """Fraction of (layer, token) cells where the prediction matches the oracle."""
    pred = predicted.assignment if isinstance(predicted, HashTable) else np.asarray(predicted)
    oracle = np.asarray(oracle)
    if pred.shape != oracle.shape:
        raise ConfigurationError(f"shape mismatch: predicted {pred.shape} vs oracle {oracle.shape}")
    return float(np.mean(pred == oracle))


# --- training -----------------------------------------------------------


def _forward_stack(params: SruParams, x: np.ndarray):
    """Vectorized forward over (sequences, tokens, d); returns hiddens + caches."""
    caches = []
    for layer in params.layers:
        u = x @ layer.w.T
        f = _sigmoid(x @ layer.w_f.T + layer.b_f)
        r = _sigmoid(x @ layer.w_r.T + layer.b_r)
        c = np.empty_like(u)
        c_t = np.zeros((x.shape[0], x.shape[2]))
        for t in range(x.shape[1]):
            c_t = f[:, t] * c_t + (1.0 - f[:, t]) * u[:, t]
            c[:, t] = c_t
        g = np.tanh(c)
        h = r * g + (1.0 - r) * x
        caches.append({"x": x, "u": u, "f": f, "r": r, "c": c, "g": g})
        x = h
    return x, caches


def _backward_stack(params: SruParams, caches, d_hidden: np.ndarray):
    grads = []
    for layer, cache in zip(reversed(params.layers), reversed(caches)):
        x, u, f, r, c, g = (cache[k] for k in ("x", "u", "f", "r", "c", "g"))
        d_r_pre = d_hidden * (g - x) * r * (1.0 - r)
        dc = d_hidden * r * (1.0 - g**2)
        du = np.empty_like(u)
        df = np.empty_like(f)
        dc_next = np.zeros((x.shape[0], x.shape[2]))
        for t in range(x.shape[1] - 1, -1, -1):
            dct = dc[:, t] + dc_next
            c_prev = c[:, t - 1] if t > 0 else np.zeros_like(dc_next)
            df[:, t] = dct * (c_prev - u[:, t])
            du[:, t] = dct * (1.0 - f[:, t])
            dc_next = dct * f[:, t]
        d_f_pre = df * f * (1.0 - f)

        d = x.shape[-1]
        x_flat = x.reshape(-1, d)
        grads.append(
            SruLayerParams(
                w=du.reshape(-1, d).T @ x_flat,
                w_f=d_f_pre.reshape(-1, d).T @ x_flat,
                w_r=d_r_pre.reshape(-1, d).T @ x_flat,
                b_f=d_f_pre.sum(axis=(0, 1)),
                b_r=d_r_pre.sum(axis=(0, 1)),
            )
        )
        d_hidden = (
            d_hidden * (1.0 - r) + du @ layer.w + d_f_pre @ layer.w_f + d_r_pre @ layer.w_r
        )
    grads.reverse()
    return grads


def loss_and_grads(params: SruParams, embeddings: np.ndarray, labels: np.ndarray):
    """Cross-entropy loss and gradients over a group of sequences.

    embeddings: (sequences, tokens, d_model); labels: (sequences, moe_layers,
    tokens). The loss sums cross-entropy over every (MoE layer, token) cell of
    a sequence and averages over the sequences of the group, so the gradient
    scale does not depend on how many sequences one step consumes.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    hidden, caches = _forward_stack(params, x)
    num_sequences = x.shape[0]

    loss = 0.0
    d_hidden = np.zeros_like(hidden)
    head_grads = np.zeros_like(params.heads)
    seq_idx = np.arange(x.shape[0])[:, None]
    tok_idx = np.arange(x.shape[1])[None, :]
    for layer in range(params.num_moe_layers):
        logits = hidden @ params.heads[layer].T  # (S, T, E)
        logits -= logits.max(axis=-1, keepdims=True)
        exp = np.exp(logits)
        probs = exp / exp.sum(axis=-1, keepdims=True)
        picked = probs[seq_idx, tok_idx, labels[:, layer]]
        loss += float(-np.log(np.maximum(picked, 1e-300)).sum()) / num_sequences
        d_logits = probs.copy()
        d_logits[seq_idx, tok_idx, labels[:, layer]] -= 1.0
        d_logits /= num_sequences
        head_grads[layer] = np.einsum("ste,std->ed", d_logits, hidden)
        d_hidden += d_logits @ params.heads[layer]

    layer_grads = _backward_stack(params, caches, d_hidden)
    return loss, SruParams(layers=layer_grads, heads=head_grads)


@dataclass
class TrainingResult:
    params: SruParams
    loss_curve: list[float]


def train_predictor(
    trace,
    epochs: int,
    learning_rate: float = 0.001,
    seed: int = 0,
    num_sru_layers: int = DEFAULT_SRU_LAYERS,
    sequences_per_step: int = 32,
) -> TrainingResult:
    """Fit the predictor to a trace's oracle routing with mini-batch SGD.

    Each gradient step consumes up to ``sequences_per_step`` trace batches in
    fixed order. Deterministic for a fixed seed; raises TrainingError naming
    the epoch if the loss stops being finite.
    """
    if epochs < 0:
        raise ConfigurationError("epochs must be >= 0")
    if learning_rate <= 0:
        raise ConfigurationError("learning_rate must be > 0")
    shape = trace.shape
    params = init_params(
        shape.num_layers, shape.experts_per_layer, shape.d_model, num_sru_layers, seed
    )
    embeddings = np.stack([b.embeddings for b in trace.batches]).astype(np.float64)
    labels = np.stack([b.oracle_routing for b in trace.batches])
    num_sequences = embeddings.shape[0]
    step = max(1, int(sequences_per_step))

    losses: list[float] = []
    for epoch in range(epochs):
        total = 0.0
        for start in range(0, num_sequences, step):
            stop = min(start + step, num_sequences)
            loss, grads = loss_and_grads(params, embeddings[start:stop], labels[start:stop])
            if not np.isfinite(loss):
                raise TrainingError("training loss is not finite", epoch=epoch)
            total += loss * (stop - start)
            for layer, grad in zip(params.layers, grads.layers):
                layer.w -= learning_rate * grad.w
                layer.w_f -= learning_rate * grad.w_f
                layer.w_r -= learning_rate * grad.w_r
                layer.b_f -= learning_rate * grad.b_f
                layer.b_r -= learning_rate * grad.b_r
            params.heads -= learning_rate * grads.heads
        if not _params_finite(params):
            raise TrainingError("parameters diverged to non-finite values", epoch=epoch)
        losses.append(total / num_sequences)
    return TrainingResult(params=params, loss_curve=losses)


def _params_finite(params: SruParams) -> bool:
    if not np.all(np.isfinite(params.heads)):
        return False
    return all(
        np.all(np.isfinite(t))
        for layer in params.layers
        for t in (layer.w, layer.w_f, layer.w_r, layer.b_f, layer.b_r)
    )


# --- serialization ------------------------------------------------------


def _format_f64(value) -> str:
    # 17 significant digits round-trip IEEE binary64 exactly.
    return f"{float(value):.17g}"


def save_sru_params(params: SruParams, path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(
            f"moesim-sru-params v{SRU_PARAMS_FORMAT_VERSION} "
            f"sru_layers={params.num_sru_layers} moe_layers={params.num_moe_layers} "
            f"experts={params.num_experts} d_model={params.d_model}\n"
        )
        for i, layer in enumerate(params.layers):
            for tag, tensor in (
                ("w", layer.w),
                ("wf", layer.w_f),
                ("wr", layer.w_r),
                ("bf", layer.b_f.reshape(1, -1)),
                ("br", layer.b_r.reshape(1, -1)),
            ):
                for row in tensor:
                    handle.write(f"{tag}{i} " + " ".join(_format_f64(v) for v in row) + "\n")
        for layer in range(params.num_moe_layers):
            for row in params.heads[layer]:
                handle.write(f"head{layer} " + " ".join(_format_f64(v) for v in row) + "\n")


def load_sru_params(path) -> SruParams:
    with open(path, encoding="utf-8") as handle:
        header = handle.readline().split()
        if len(header) < 2 or header[0] != "moesim-sru-params":
            raise TraceParseError("not a moesim-sru-params file", line=1)
        try:
            fields = dict(part.split("=", 1) for part in header[2:])
            sru_layers = int(fields["sru_layers"])
            moe_layers = int(fields["moe_layers"])
            experts = int(fields["experts"])
            d_model = int(fields["d_model"])
        except (ValueError, KeyError) as exc:
            raise TraceParseError(f"bad header: {exc}", line=1) from exc

        lineno = [1]

        def read_rows(tag: str, rows: int, width: int) -> np.ndarray:
            data = np.zeros((rows, width))
            for i in range(rows):
                lineno[0] += 1
                raw = handle.readline()
                if not raw:
                    raise TraceParseError(f"truncated file while reading {tag}", line=lineno[0])
                tokens = raw.split()
                if len(tokens) != width + 1 or tokens[0] != tag:
                    raise TraceParseError(f"expected a {tag} row of {width} values", line=lineno[0])
                try:
                    data[i] = [float(tok) for tok in tokens[1:]]
                except ValueError as exc:
                    raise TraceParseError(f"bad float: {exc}", line=lineno[0]) from exc
            return data

        layers = []
        for i in range(sru_layers):
            layers.append(
                SruLayerParams(
                    w=read_rows(f"w{i}", d_model, d_model),
                    w_f=read_rows(f"wf{i}", d_model, d_model),
                    w_r=read_rows(f"wr{i}", d_model, d_model),
                    b_f=read_rows(f"bf{i}", 1, d_model)[0],
                    b_r=read_rows(f"br{i}", 1, d_model)[0],
                )
            )
        heads = np.stack([read_rows(f"head{l}", experts, d_model) for l in range(moe_layers)])
        if handle.readline():
            raise TraceParseError("trailing data after parameter rows", line=lineno[0] + 1)
    return SruParams(layers=layers, heads=heads)

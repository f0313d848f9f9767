"""SRU math, sparsemax, hash tables, and predictor training."""

import math

import numpy as np
import pytest

from moesim import (
    ConfigurationError,
    HashTable,
    ModelShape,
    RoutingTrace,
    TrainingError,
    evaluate_accuracy,
    generate_trace,
    init_params,
    predict_batch,
    sparsemax,
    sru_cell,
    sru_forward,
    train_predictor,
)
from moesim.predictor import (
    SruLayerParams,
    SruParams,
    load_sru_params,
    loss_and_grads,
    save_sru_params,
)


def _random_layer(rng, d):
    return SruLayerParams(
        w=rng.normal(size=(d, d)),
        w_f=rng.normal(size=(d, d)),
        w_r=rng.normal(size=(d, d)),
        b_f=rng.normal(size=d),
        b_r=rng.normal(size=d),
    )


def _scalar_cell_oracle(x, c_prev, layer):
    """The five equations evaluated with python floats, element by element."""
    d = len(x)
    x_proj = [sum(layer.w[i][j] * x[j] for j in range(d)) for i in range(d)]
    f = [1.0 / (1.0 + math.exp(-(sum(layer.w_f[i][j] * x[j] for j in range(d)) + layer.b_f[i])))
         for i in range(d)]
    r = [1.0 / (1.0 + math.exp(-(sum(layer.w_r[i][j] * x[j] for j in range(d)) + layer.b_r[i])))
         for i in range(d)]
    c = [f[i] * c_prev[i] + (1.0 - f[i]) * x_proj[i] for i in range(d)]
    h = [r[i] * math.tanh(c[i]) + (1.0 - r[i]) * x[i] for i in range(d)]
    return np.array(h), np.array(c)


class TestSruCell:
    def test_zero_everything_gives_zero_state(self):
        layer = SruLayerParams(
            w=np.zeros((3, 3)), w_f=np.zeros((3, 3)), w_r=np.zeros((3, 3)),
            b_f=np.zeros(3), b_r=np.zeros(3),
        )
        h, c = sru_cell(np.zeros(3), np.zeros(3), layer)
        assert np.array_equal(h, np.zeros(3))
        assert np.array_equal(c, np.zeros(3))

    def test_saturated_forget_gate_keeps_cell_state(self, rng):
        layer = _random_layer(rng, 4)
        layer.b_f = np.full(4, 50.0)  # sigmoid(~50) is 1 to machine precision
        c_prev = rng.normal(size=4)
        _, c = sru_cell(rng.normal(size=4), c_prev, layer)
        assert np.allclose(c, c_prev, atol=1e-8)

    def test_matches_scalar_oracle(self, rng):
        layer = _random_layer(rng, 3)
        x = rng.normal(size=3)
        c_prev = rng.normal(size=3)
        h, c = sru_cell(x, c_prev, layer)
        h_ref, c_ref = _scalar_cell_oracle(x, c_prev, layer)
        assert np.allclose(h, h_ref, rtol=1e-12)
        assert np.allclose(c, c_ref, rtol=1e-12)

    def test_manual_stack_with_state_container_matches_forward(self, rng):
        from moesim import SruState

        layers = [_random_layer(rng, 4), _random_layer(rng, 4)]
        params = SruParams(layers=layers, heads=np.zeros((1, 2, 4)))
        x = rng.normal(size=(5, 4))
        state = SruState.zeros(2, 4)
        manual = np.empty_like(x)
        for t in range(5):
            h = x[t]
            for i, layer in enumerate(layers):
                h, state.cells[i] = sru_cell(h, state.cells[i], layer)
            manual[t] = h
        assert np.allclose(manual, sru_forward(x, params), rtol=1e-12)


class TestSruForward:
    def test_single_token_single_layer_equals_cell(self, rng):
        layer = _random_layer(rng, 5)
        params = SruParams(layers=[layer], heads=np.zeros((1, 2, 5)))
        x = rng.normal(size=(1, 5))
        h_cell, _ = sru_cell(x[0], np.zeros(5), layer)
        assert np.allclose(sru_forward(x, params), h_cell[None, :], rtol=1e-12)

    def test_all_zero_weights_halve_the_input_per_layer(self, rng):
        # sigma(0) = 0.5 and tanh(0) = 0, so each layer outputs 0.5 * x.
        def zero_layer(d):
            return SruLayerParams(
                np.zeros((d, d)), np.zeros((d, d)), np.zeros((d, d)), np.zeros(d), np.zeros(d)
            )

        x = rng.normal(size=(4, 6))
        one = SruParams(layers=[zero_layer(6)], heads=np.zeros((1, 2, 6)))
        assert np.allclose(sru_forward(x, one), 0.5 * x, rtol=1e-12)
        two = SruParams(layers=[zero_layer(6), zero_layer(6)], heads=np.zeros((1, 2, 6)))
        assert np.allclose(sru_forward(x, two), 0.25 * x, rtol=1e-12)

    def test_matches_unrolled_cell_oracle(self, rng):
        layers = [_random_layer(rng, 4), _random_layer(rng, 4)]
        params = SruParams(layers=layers, heads=np.zeros((1, 2, 4)))
        x = rng.normal(size=(3, 4))
        expected = x.copy()
        for layer in layers:
            c = np.zeros(4)
            out = np.empty_like(expected)
            for t in range(3):
                out[t], c = sru_cell(expected[t], c, layer)
            expected = out
        assert np.allclose(sru_forward(x, params), expected, rtol=1e-12)

    def test_empty_batch_rejected(self, rng):
        params = init_params(1, 2, 4, num_sru_layers=1, seed=0)
        with pytest.raises(ConfigurationError):
            sru_forward(np.zeros((0, 4)), params)

    def test_cell_state_stays_in_convex_hull(self, rng):
        # With |x| <= 1 and weights bounded by 1, c_t is a convex combination
        # of c_0 and the projected inputs, so it never exceeds max |x'_t|.
        for trial in range(20):
            d = int(rng.integers(2, 6))
            layer = SruLayerParams(
                w=rng.uniform(-1, 1, size=(d, d)),
                w_f=rng.uniform(-1, 1, size=(d, d)),
                w_r=rng.uniform(-1, 1, size=(d, d)),
                b_f=rng.uniform(-1, 1, size=d),
                b_r=rng.uniform(-1, 1, size=d),
            )
            xs = rng.uniform(-1, 1, size=(10, d))
            projected = xs @ layer.w.T
            bound = np.abs(projected).max(axis=0)
            c = np.zeros(d)
            for t in range(10):
                _, c = sru_cell(xs[t], c, layer)
                assert np.all(np.abs(c) <= bound + 1e-12)


def _michelot_projection(z):
    """Independent simplex projection: alternate hyperplane shift and clipping."""
    active = np.ones(len(z), dtype=bool)
    v = np.asarray(z, dtype=np.float64).copy()
    while True:
        shift = (v[active].sum() - 1.0) / active.sum()
        v[active] -= shift
        negative = active & (v < 0)
        if not negative.any():
            break
        v[negative] = 0.0
        active &= v > 0
    v[~active] = 0.0
    return v


class TestSparsemax:
    def test_symmetric_pair(self):
        assert np.allclose(sparsemax(np.array([0.0, 0.0])), [0.5, 0.5])

    def test_large_margin_is_one_hot(self):
        assert np.allclose(sparsemax(np.array([10.0, 0.0])), [1.0, 0.0])

    def test_three_way_example(self):
        # Frozen via the simplex projection oracle; spec-level tolerance 1e-4.
        got = sparsemax(np.array([0.5, 0.1, 0.05]))
        assert np.allclose(got, [0.6167, 0.2167, 0.1667], atol=1e-4)
        assert np.allclose(got, _michelot_projection([0.5, 0.1, 0.05]), atol=1e-12)

    def test_matches_projection_oracle(self, rng):
        for _ in range(300):
            n = int(rng.integers(2, 12))
            z = rng.normal(scale=rng.uniform(0.1, 5.0), size=n)
            p = sparsemax(z)
            assert np.allclose(p, _michelot_projection(z), atol=1e-9)

    def test_simplex_and_argmax_invariants(self, rng):
        for _ in range(300):
            z = rng.normal(size=int(rng.integers(2, 10)))
            p = sparsemax(z)
            assert np.all(p >= 0)
            assert abs(p.sum() - 1.0) < 1e-9
            assert np.argmax(p) == np.argmax(z)

    def test_idempotent_on_simplex_points(self, rng):
        for _ in range(50):
            p = rng.dirichlet(np.ones(6))
            assert np.allclose(sparsemax(p), p, atol=1e-12)


class TestHashTable:
    def test_counts_all_tokens_on_one_expert(self):
        table = HashTable.from_assignment(0, np.full((1, 4), 2))
        assert table.replica_counts == [{2: 4}]

    def test_counts_all_distinct(self):
        table = HashTable.from_assignment(1, np.array([[0, 1, 2, 3]]))
        assert table.replica_counts == [{0: 1, 1: 1, 2: 1, 3: 1}]

    def test_mismatched_counts_rejected(self):
        with pytest.raises(ConfigurationError):
            HashTable(0, np.array([[0, 0]]), replica_counts=[{0: 1}])

    def test_predict_batch_counts_match_histogram(self, small_trace):
        shape = small_trace.shape
        params = init_params(
            shape.num_layers, shape.experts_per_layer, shape.d_model, num_sru_layers=2, seed=3
        )
        table = predict_batch(small_trace.batches[0], params)
        for layer in range(shape.num_layers):
            row = table.assignment[layer]
            experts, counts = np.unique(row, return_counts=True)
            assert table.replica_counts[layer] == {int(e): int(c) for e, c in zip(experts, counts)}


class TestEvaluateAccuracy:
    def test_identical(self):
        a = np.array([[0, 1], [2, 3]])
        assert evaluate_accuracy(a, a) == 1.0

    def test_disjoint(self):
        a = np.array([[0, 1], [2, 3]])
        assert evaluate_accuracy(a, a + 1) == 0.0

    def test_half_flipped(self):
        a = np.array([[0, 1], [2, 3]])
        b = np.array([[0, 1], [5, 6]])
        assert evaluate_accuracy(a, b) == 0.5

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            evaluate_accuracy(np.zeros((1, 2)), np.zeros((2, 2)))


class TestTraining:
    def test_zero_epochs_returns_seeded_init(self, small_trace):
        shape = small_trace.shape
        result = train_predictor(small_trace, epochs=0, seed=11, num_sru_layers=2)
        reference = init_params(
            shape.num_layers, shape.experts_per_layer, shape.d_model, num_sru_layers=2, seed=11
        )
        assert result.loss_curve == []
        assert np.array_equal(result.params.heads, reference.heads)
        for got, want in zip(result.params.layers, reference.layers):
            assert np.array_equal(got.w, want.w)
            assert np.array_equal(got.b_r, want.b_r)

    def test_loss_decreases(self, small_trace):
        result = train_predictor(small_trace, epochs=10, seed=0, num_sru_layers=2)
        assert result.loss_curve[-1] < result.loss_curve[0]

    def test_degenerate_skew_reaches_high_accuracy(self):
        shape = ModelShape(num_layers=2, experts_per_layer=4, d_model=16, batch_size=32)
        trace = generate_trace(shape, num_batches=40, skew=10.0, seed=2)
        train = RoutingTrace(shape, trace.batches[:32], skew=trace.skew, seed=trace.seed)
        held = trace.batches[32:]
        result = train_predictor(train, epochs=80, learning_rate=0.001, seed=0, num_sru_layers=2)
        scores = [
            evaluate_accuracy(predict_batch(b, result.params), b.oracle_routing) for b in held
        ]
        assert float(np.mean(scores)) >= 0.99

    def test_divergence_raises_with_epoch(self, small_trace):
        with np.errstate(all="ignore"), pytest.raises(TrainingError) as excinfo:
            train_predictor(small_trace, epochs=20, learning_rate=1e200, seed=0, num_sru_layers=2)
        assert excinfo.value.epoch is not None

    def test_deterministic(self, small_trace):
        a = train_predictor(small_trace, epochs=3, seed=5, num_sru_layers=2)
        b = train_predictor(small_trace, epochs=3, seed=5, num_sru_layers=2)
        assert a.loss_curve == b.loss_curve
        assert np.array_equal(a.params.heads, b.params.heads)


def finite_difference_check(params, x, y, step=1e-4, rtol=1e-3):
    """Central finite differences of the loss against analytic gradients."""
    _, grads = loss_and_grads(params, x, y)

    def loss_at():
        return loss_and_grads(params, x, y)[0]

    def check(tensor, grad):
        it = np.nditer(tensor, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            saved = tensor[idx]
            tensor[idx] = saved + step
            up = loss_at()
            tensor[idx] = saved - step
            down = loss_at()
            tensor[idx] = saved
            fd = (up - down) / (2 * step)
            denom = max(abs(fd), abs(grad[idx]), 1e-6)
            assert abs(fd - grad[idx]) / denom <= rtol, (idx, fd, grad[idx])

    for layer, glayer in zip(params.layers, grads.layers):
        for name in ("w", "w_f", "w_r", "b_f", "b_r"):
            check(getattr(layer, name), getattr(glayer, name))
    check(params.heads, grads.heads)


class TestGradients:
    def test_analytic_matches_central_differences(self, rng):
        for trial in range(5):
            d = int(rng.integers(2, 6))
            moe_layers = int(rng.integers(1, 3))
            experts = int(rng.integers(2, 5))
            tokens = int(rng.integers(1, 4))
            sequences = int(rng.integers(1, 3))
            params = init_params(moe_layers, experts, d, num_sru_layers=2, seed=trial)
            x = rng.normal(size=(sequences, tokens, d))
            y = rng.integers(0, experts, size=(sequences, moe_layers, tokens))
            finite_difference_check(params, x, y)


class TestSruParamsIO:
    def test_round_trip_exact(self, tmp_path):
        params = init_params(2, 3, 4, num_sru_layers=2, seed=8)
        path = tmp_path / "sru.txt"
        save_sru_params(params, path)
        loaded = load_sru_params(path)
        assert np.array_equal(loaded.heads, params.heads)
        for got, want in zip(loaded.layers, params.layers):
            assert np.array_equal(got.w, want.w)
            assert np.array_equal(got.w_f, want.w_f)
            assert np.array_equal(got.w_r, want.w_r)
            assert np.array_equal(got.b_f, want.b_f)
            assert np.array_equal(got.b_r, want.b_r)

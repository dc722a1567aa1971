"""
Autodiff core tests: gradients against finite differences, AdamW and checkpoints.
"""

import numpy as np
import pytest

from colacare.nn_core import (
    DimensionError,
    ParamStore,
    Tape,
    Tensor,
    TrainingError,
    backward,
    forward_attention_pool,
    forward_gate,
    forward_gru_cell,
    forward_linear,
    load_params,
    numerical_gradient,
    optimizer_step,
    save_params,
)


def _gru_store(rng, n_in=3, hidden=4):
    store = ParamStore()
    for gate in ("z", "r", "n"):
        store.init_uniform(f"gru.W{gate}", (n_in, hidden), rng)
        store.init_uniform(f"gru.U{gate}", (hidden, hidden), rng)
        store.init_uniform(f"gru.b{gate}", (1, hidden), rng, fan_in=hidden)
    store.init_uniform("attn.w", (hidden, 1), rng)
    store.init_uniform("attn.b", (1, 1), rng, fan_in=hidden)
    store.init_uniform("out.W", (hidden, 1), rng)
    store.init_uniform("out.b", (1, 1), rng, fan_in=hidden)
    return store


def _sequence_loss(store, xs, labels, record=True):
    tape = Tape(record=record)
    p = store.params
    h = Tensor(np.zeros((xs[0].shape[0], p["gru.Uz"].rows)))
    states = []
    for x in xs:
        h = forward_gru_cell(tape, Tensor(x), h, p)
        states.append(h)
    pooled, _ = forward_attention_pool(tape, states, p)
    probs = tape.sigmoid(forward_linear(tape, pooled, p["out.W"], p["out.b"]))
    return tape, tape.bce(probs, labels)


def _gated_loss(store, summary, xs, labels, record=True):
    tape = Tape(record=record)
    p = store.params
    gate = forward_gate(tape, Tensor(summary), p)
    h = Tensor(np.zeros((summary.shape[0], p["gru.Uz"].rows)))
    for x in xs:
        h = forward_gru_cell(tape, tape.mul(Tensor(x), gate), h, p)
    probs = tape.sigmoid(forward_linear(tape, h, p["out.W"], p["out.b"]))
    return tape, tape.bce(probs, labels)


def _assert_gradients(store, grads, loss_fn, rng, n_coords=20):
    """Central differences on ``n_coords`` random entries drawn over all parameters."""
    names = store.names()
    checked = set()
    while len(checked) < n_coords:
        name = names[rng.integers(len(names))]
        tensor = store[name]
        index = (int(rng.integers(tensor.rows)), int(rng.integers(tensor.cols)))
        if (name, index) in checked:
            continue
        checked.add((name, index))
        numeric = numerical_gradient(loss_fn, tensor, index)
        assert grads[name][index] == pytest.approx(numeric, rel=1e-4, abs=1e-7), (name, index)
    return checked


def test_gru_attention_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    store = _gru_store(rng)
    xs = [rng.normal(size=(5, 3)) for _ in range(4)]
    labels = np.array([1, 0, 1, 0, 0])

    tape, loss = _sequence_loss(store, xs, labels)
    grads = backward(tape, loss, params=store.params)

    loss_fn = lambda: float(_sequence_loss(store, xs, labels, record=False)[1].data[0, 0])
    checked = _assert_gradients(store, grads, loss_fn, rng, n_coords=40)
    assert len(checked) == 40
    for name in ("gru.Wz", "gru.Un", "gru.br", "attn.w", "out.b"):
        tensor = store[name]
        for index in [(0, 0), (tensor.rows - 1, tensor.cols - 1)]:
            numeric = numerical_gradient(loss_fn, tensor, index)
            assert grads[name][index] == pytest.approx(numeric, rel=1e-4, abs=1e-7), name


def test_recalibration_gate_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    store = _gru_store(rng)
    store.init_uniform("gate.W1", (6, 2), rng)
    store.init_uniform("gate.b1", (1, 2), rng, fan_in=6)
    store.init_uniform("gate.W2", (2, 3), rng)
    store.init_uniform("gate.b2", (1, 3), rng, fan_in=2)
    summary = rng.normal(size=(5, 6))
    xs = [rng.normal(size=(5, 3)) for _ in range(3)]
    labels = np.array([0, 1, 1, 0, 1])

    tape, loss = _gated_loss(store, summary, xs, labels)
    grads = backward(tape, loss, params=store.params)
    assert np.all(grads["attn.w"] == 0.0)

    loss_fn = lambda: float(_gated_loss(store, summary, xs, labels, record=False)[1].data[0, 0])
    _assert_gradients(store, grads, loss_fn, rng, n_coords=20)
    for name in ("gate.W1", "gate.b1", "gate.W2", "gate.b2"):
        tensor = store[name]
        for index in [(0, 0), (tensor.rows - 1, tensor.cols - 1)]:
            numeric = numerical_gradient(loss_fn, tensor, index)
            assert grads[name][index] == pytest.approx(numeric, rel=1e-4, abs=1e-7), name


def test_gate_entries_stay_in_unit_interval():
    rng = np.random.default_rng(1)
    store = ParamStore()
    store.init_uniform("gate.W1", (6, 3), rng)
    store.init_uniform("gate.b1", (1, 3), rng)
    store.init_uniform("gate.W2", (3, 6), rng)
    store.init_uniform("gate.b2", (1, 6), rng)
    gate = forward_gate(Tape(record=False), Tensor(rng.normal(size=(4, 6)) * 50), store.params)
    assert gate.shape == (4, 6)
    assert np.all(gate.data > 0) and np.all(gate.data < 1)


def test_sigmoid_is_clamped_for_extreme_inputs():
    tape = Tape()
    x = Tensor(np.array([[-1e4, 0.0, 1e4]]), requires_grad=True)
    out = tape.sigmoid(x)
    assert np.all(np.isfinite(out.data))
    tape.backward(tape.mean(out))
    assert x.grad[0, 0] == 0.0 and x.grad[0, 2] == 0.0


def test_bce_of_confident_wrong_prediction_is_finite():
    tape = Tape()
    loss = tape.bce(Tensor(np.array([[0.0], [1.0]])), np.array([1, 0]))
    assert np.isfinite(loss.data[0, 0])
    assert loss.data[0, 0] == pytest.approx(-np.log(1e-7), rel=1e-6)


def test_matmul_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        Tape().matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_untouched_parameters_get_zero_gradient():
    rng = np.random.default_rng(2)
    store = ParamStore()
    store.init_uniform("a.W", (2, 1), rng)
    store.init_uniform("a.b", (1, 1), rng)
    store.init_uniform("unused", (3, 3), rng)
    tape = Tape()
    loss = tape.mean(forward_linear(tape, Tensor(np.ones((4, 2))), store["a.W"], store["a.b"]))
    grads = backward(tape, loss, params=store.params)
    assert np.all(grads["unused"] == 0.0)
    assert np.allclose(grads["a.W"], 1.0)


def test_adamw_decay_is_decoupled_from_gradient():
    store = ParamStore()
    store.add("w", np.array([[2.0]]))
    optimizer_step(store, {"w": np.zeros((1, 1))}, lr=0.1, weight_decay=0.5)
    # zero gradient: only the decoupled shrink applies
    assert store["w"].data[0, 0] == pytest.approx(2.0 * (1 - 0.05))


def test_adamw_first_step_moves_by_learning_rate():
    store = ParamStore()
    store.add("w", np.array([[1.0, -1.0]]))
    optimizer_step(store, {"w": np.array([[3.0, -0.2]])}, lr=0.01, weight_decay=0.0)
    assert np.allclose(store["w"].data, [[0.99, -0.99]], atol=1e-6)


def test_optimizer_rejects_non_finite_gradient():
    store = ParamStore()
    store.add("w", np.zeros((1, 1)))
    with pytest.raises(TrainingError):
        optimizer_step(store, {"w": np.array([[np.nan]])}, lr=0.01)


def test_param_checkpoint_restores_values(tmp_path):
    rng = np.random.default_rng(3)
    store = _gru_store(rng)
    path = str(tmp_path / "params.json")
    save_params(store, path)
    loaded = load_params(path)
    assert loaded.names() == store.names()
    for name in store.names():
        assert np.array_equal(loaded[name].data, store[name].data)

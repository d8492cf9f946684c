import numpy as np
import pytest
from hypothesis import given, strategies as st

from canids.detector import build_stage1, build_stage2
from canids.errors import CorruptPayload, LayoutMismatch, NonFiniteLoss, ShapeMismatch, VersionMismatch
from canids.nn import (
    AdamState,
    Dense,
    Dropout,
    EarlyStopping,
    Lstm,
    SequentialModel,
    TrainConfig,
    adam_step,
    count_params,
    deserialize,
    from_json,
    one_hot,
    serialize,
    to_json,
    train,
)

from oracles import adam_trace, analytic_gradient, numeric_gradient, random_toy_model, worst_relative_error


# parameter counts

def test_dense_3_to_2_has_8_params():
    assert count_params(SequentialModel([Dense(2)], "mse", (3,))) == 8


def test_stage_architecture_counts():
    assert count_params(build_stage1(5)) == 517
    assert count_params(build_stage1(6)) == 534
    assert count_params(build_stage2()) == 253_065
    assert count_params(build_stage1(5)) + count_params(build_stage2()) == 253_582


@given(units=st.integers(1, 12), d_in=st.integers(1, 12))
def test_lstm_param_formula(units, d_in):
    m = SequentialModel([Lstm(units)], "mse", (2, d_in))
    assert m.count_params() == 4 * (units * (d_in + units) + units)


# forward pass

def test_softmax_rows_sum_to_one(rng):
    m = SequentialModel([Dense(7, "relu"), Dense(4, "softmax")], "categorical_crossentropy", (5,), seed=2)
    out = m.forward(rng.normal(size=(50, 5)) * 10)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
    assert (out >= 0).all()


def test_relu_definition():
    m = SequentialModel([Dense(1, "relu")], "mse", (1,))
    m.params[:] = [1.0, 0.0]
    np.testing.assert_array_equal(m.forward(np.array([[-1.0], [2.0]])).ravel(), [0.0, 2.0])


def test_zero_lstm_outputs_zero(rng):
    m = SequentialModel([Lstm(3, return_sequences=True)], "mse", (4, 2))
    m.params[:] = 0.0
    np.testing.assert_array_equal(m.forward(rng.normal(size=(3, 4, 2))), 0.0)


def test_forward_rejects_wrong_shape():
    with pytest.raises(ShapeMismatch):
        build_stage1(5).forward(np.zeros((2, 8)))


def test_inference_ignores_dropout(rng):
    m = SequentialModel([Dense(6, "tanh"), Dropout(0.5), Dense(2)], "mse", (3,), seed=1)
    x = rng.normal(size=(8, 3))
    np.testing.assert_array_equal(m.predict(x), m.predict(x))
    trained_pass = m.forward(x, train=True, rng=np.random.default_rng(0))
    assert not np.allclose(trained_pass, m.predict(x))


def test_dropout_inverted_scaling_preserves_mean():
    m = SequentialModel([Dropout(0.2)], "mse", (1,))
    out = m.forward(np.ones((200_000, 1)), train=True, rng=np.random.default_rng(0))
    assert abs(out.mean() - 1.0) < 0.01
    assert set(np.unique(out)) <= {0.0, 1.25}


def test_lstm_state_finite_under_bounded_input(rng):
    m = SequentialModel([Lstm(8, return_sequences=True, activation="relu")], "mse", (30, 3), seed=4)
    assert np.isfinite(m.forward(rng.uniform(-5, 5, size=(4, 30, 3)))).all()


# gradients

@pytest.mark.parametrize("seed", range(8))
def test_gradients_match_finite_differences(seed):
    model, x, t, drop_seed = random_toy_model(seed)
    a = analytic_gradient(model, x, t, drop_seed)
    n = numeric_gradient(model, x, t, drop_seed)
    assert worst_relative_error(model, a, n) < 1e-4


def test_four_unit_toy_gradients():
    m = SequentialModel([Dense(4, "tanh"), Dense(3, "softmax")], "categorical_crossentropy", (2,), seed=9)
    x = np.random.default_rng(0).normal(size=(6, 2))
    t = one_hot(np.array([0, 1, 2, 0, 1, 2]), 3)
    assert worst_relative_error(m, analytic_gradient(m, x, t), numeric_gradient(m, x, t)) < 1e-4


def test_zero_loss_gives_zero_gradient(rng):
    m = SequentialModel([Dense(3, "tanh"), Dense(2)], "mse", (4,), seed=0)
    x = rng.normal(size=(5, 4))
    m.loss_and_grad(x, m.forward(x), train=False)
    np.testing.assert_allclose(m.grads, 0.0, atol=1e-12)


def test_doubling_residual_doubles_gradient(rng):
    m = SequentialModel([Dense(3, "relu"), Dense(2)], "mse", (4,), seed=0)
    x = rng.normal(size=(5, 4))
    out = m.forward(x)
    t = out + rng.normal(size=out.shape)
    m.loss_and_grad(x, t, train=False)
    g1 = m.grads.copy()
    m.loss_and_grad(x, out + 2 * (t - out), train=False)
    np.testing.assert_allclose(m.grads, 2 * g1, rtol=1e-12, atol=1e-15)


def test_one_hot_rejects_out_of_range():
    with pytest.raises(ShapeMismatch):
        one_hot(np.array([0, 3]), 3)


# Adam

def test_adam_zero_gradient_is_noop():
    p = np.array([1.0, -2.0])
    adam_step(AdamState(2), p, np.zeros(2))
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adam_first_step_is_lr_times_sign():
    g = np.array([3.0, -0.02, 1e-3])
    p = np.zeros(3)
    adam_step(AdamState(3), p, g)
    np.testing.assert_allclose(p, -0.001 * np.sign(g), rtol=1e-4)


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.integers(1, 6))
def test_adam_matches_scripted_trace(g, steps):
    rng = np.random.default_rng(steps)
    grads = [np.array(g) * rng.uniform(0.5, 1.5) for _ in range(steps)]
    p0 = rng.normal(size=3)
    p = p0.copy()
    state = AdamState(3)
    for gr in grads:
        adam_step(state, p, gr)
    np.testing.assert_allclose(p, adam_trace([list(gr) for gr in grads], p0), atol=1e-12, rtol=0)


# training loop

def _toy_separable(n=200, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    return x, (x[:, 0] + x[:, 1] > 0).astype(int)


def test_patience_one_with_rising_validation_stops_at_epoch_two():
    m = SequentialModel([Dense(1)], "mse", (1,), seed=0)
    m.params[:] = [0.0, 0.0]
    x = np.linspace(-1, 1, 64)[:, None]
    cfg = TrainConfig(batch_size=8, max_epochs=10, early_stopping=EarlyStopping(patience=1), learning_rate=0.01)
    rep = train(m, x, 2 * x, cfg, validation=(x, -2 * x))
    assert all(b > a for a, b in zip(rep.val_loss, rep.val_loss[1:]))
    assert rep.stopped_epoch == 2 and rep.early_stopped


def test_same_seed_same_losses_and_params():
    x, y = _toy_separable()
    runs = []
    for _ in range(2):
        m = SequentialModel([Dense(4, "relu"), Dropout(0.3), Dense(2, "softmax")], "categorical_crossentropy", (2,), seed=5)
        rep = train(m, x, y, TrainConfig(batch_size=16, max_epochs=4, seed=11))
        runs.append((rep.train_loss, m.params.copy()))
    assert runs[0][0] == runs[1][0]
    np.testing.assert_array_equal(runs[0][1], runs[1][1])


def test_separable_loss_decreases_over_five_epochs():
    x, y = _toy_separable()
    m = SequentialModel([Dense(8, "relu"), Dense(2, "softmax")], "categorical_crossentropy", (2,), seed=1)
    rep = train(m, x, y, TrainConfig(batch_size=16, max_epochs=5, early_stopping=None, learning_rate=0.01))
    assert all(b < a for a, b in zip(rep.train_loss, rep.train_loss[1:]))


def test_restore_best_keeps_best_parameters():
    m = SequentialModel([Dense(1)], "mse", (1,), seed=0)
    m.params[:] = [0.0, 0.0]
    x = np.linspace(-1, 1, 64)[:, None]
    es = EarlyStopping(patience=2, restore_best=True)
    train(m, x, 2 * x, TrainConfig(batch_size=8, max_epochs=10, early_stopping=es, learning_rate=0.01), (x, -2 * x))
    first = SequentialModel([Dense(1)], "mse", (1,), seed=0)
    first.params[:] = [0.0, 0.0]
    train(first, x, 2 * x, TrainConfig(batch_size=8, max_epochs=1, early_stopping=None, learning_rate=0.01))
    np.testing.assert_array_equal(m.params, first.params)


def test_non_finite_loss_raises():
    m = SequentialModel([Dense(1)], "mse", (1,))
    with pytest.raises(NonFiniteLoss):
        train(m, np.array([[1.0]]), np.array([[np.inf]]), TrainConfig(max_epochs=1))


# parameters and serialization

def test_parameter_set_layout_guard():
    with pytest.raises(LayoutMismatch):
        build_stage1(5).set_parameters(build_stage1(6).get_parameters())


def test_stage1_round_trip_bit_identical():
    m = build_stage1(5, seed=3)
    back = deserialize(serialize(m))
    assert back.params.tobytes() == m.params.tobytes()
    assert back.architecture() == m.architecture()


def test_json_round_trip():
    m = build_stage1(4, seed=8)
    np.testing.assert_array_equal(from_json(to_json(m)).params, m.params)


def test_serialized_sizes_within_claims():
    assert len(serialize(build_stage1(5))) < 0.05 * 1024 * 1024
    assert len(serialize(build_stage2())) < 3.0 * 1024 * 1024


def test_corrupted_payload_detected():
    blob = bytearray(serialize(build_stage1(5)))
    blob[-3] ^= 0xFF
    with pytest.raises(CorruptPayload):
        deserialize(bytes(blob))
    with pytest.raises(CorruptPayload):
        deserialize(b"not a model")


def test_newer_version_refused():
    blob = bytearray(serialize(build_stage1(5)))
    blob[8] = 99
    with pytest.raises(VersionMismatch):
        deserialize(bytes(blob))

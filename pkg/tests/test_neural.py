import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gradient_check
from socfusion.neural import (
    Mlp,
    MlpSpec,
    TrainSpec,
    load_mlp,
    mlp_backward,
    mlp_forward,
    mlp_init,
    mlp_loss,
    mlp_predict,
    mlp_train,
    save_mlp,
    split_indices,
)


def _net(sizes=(3, 5, 4, 2), seed=0):
    net = mlp_init(MlpSpec(sizes, seed=seed))
    rng = np.random.default_rng(seed)
    for b in net.biases:
        b[:] = rng.normal(0, 0.1, b.shape)
    return net


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((3, 1))
    with pytest.raises(ValueError):
        MlpSpec((3, 0, 1))
    with pytest.raises(ValueError):
        TrainSpec(loss="huber")
    with pytest.raises(ValueError):
        TrainSpec(lr_decay=0.0)


def test_forward_single_matches_batch():
    # summation order may differ between vector and matrix products
    net = _net()
    X = np.random.default_rng(1).normal(size=(6, 3))
    batch = mlp_predict(net, X)
    for x, row in zip(X, batch):
        assert np.allclose(mlp_forward(net, x), row, rtol=1e-14, atol=1e-14)


def test_forward_rejects_wrong_width():
    with pytest.raises(ValueError):
        mlp_forward(_net(), np.zeros(4))


def test_forward_hand_computed():
    net = Mlp([np.array([[1.0, -1.0]]), np.array([[2.0], [3.0]])],
              [np.array([0.0, 0.5]), np.array([0.25])], [1.0], [2.0])
    # z = (5 - 1)/2 = 2; hidden = relu([2, -1.5]) = [2, 0]; out = 4 + 0.25
    assert mlp_forward(net, [5.0])[0] == 4.25


def test_output_bias_and_zero_weights_init():
    net = mlp_init(MlpSpec((1, 8, 3), seed=2), output_bias=[1.0, 2.0, 3.0], zero_output_weights=True)
    out = mlp_predict(net, np.random.default_rng(0).normal(size=(5, 1)))
    assert np.array_equal(out, np.tile([1.0, 2.0, 3.0], (5, 1)))


@pytest.mark.parametrize("loss", ["squared", "absolute"])
@pytest.mark.parametrize("readout", [False, True])
def test_gradient_matches_extended_precision_differences(loss, readout):
    rng = np.random.default_rng(5)
    net = _net(seed=3)
    X = rng.normal(size=(9, 3))
    R = rng.normal(size=(9, 2)) if readout else None
    Y = rng.normal(size=(9, 1 if readout else 2))
    assert gradient_check(net, X, Y, loss, R) <= 1e-5


def test_backward_loss_value_matches_loss():
    net = _net()
    rng = np.random.default_rng(0)
    X, Y = rng.normal(size=(8, 3)), rng.normal(size=(8, 2))
    for loss in ("squared", "absolute"):
        assert mlp_backward(net, X, Y, loss)[0] == mlp_loss(net, X, Y, loss)


def test_readout_shape_checked():
    net = _net()
    with pytest.raises(ValueError):
        mlp_loss(net, np.zeros((4, 3)), np.zeros(4), readout=np.zeros((4, 3)))


def test_split_is_deterministic_and_disjoint():
    ts = TrainSpec(seed=4)
    a, b = split_indices(100, ts)
    assert len(a) == 80 and len(b) == 20
    assert not set(a) & set(b)
    a2, _ = split_indices(100, ts)
    assert np.array_equal(a, a2)
    _, cb = split_indices(10, TrainSpec(chronological_split=True))
    assert list(cb) == [8, 9]


def test_learns_linear_map():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (2000, 3))
    Y = X @ np.array([1.0, -2.0, 0.5]) + 0.3
    ts = TrainSpec(epochs=300, lr=1e-2, lr_decay=0.98, batch_size=64, patience=None)
    net, log = mlp_train(MlpSpec((3, 16, 1)), ts, X, Y)
    err = np.sqrt(np.mean((mlp_predict(net, X)[:, 0] - Y) ** 2))
    assert err <= 1e-3 * Y.std()
    assert log.val_loss[log.best_epoch] == min(log.val_loss)


def test_training_is_deterministic():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(200, 2))
    Y = np.sin(X[:, :1])
    ts = TrainSpec(epochs=5)
    a, _ = mlp_train(MlpSpec((2, 6, 1), seed=3), ts, X, Y)
    b, _ = mlp_train(MlpSpec((2, 6, 1), seed=3), ts, X, Y)
    assert all(np.array_equal(p, q) for p, q in zip(a.weights + a.biases, b.weights + b.biases))


def test_early_stopping_keeps_best_epoch():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(60, 2))
    Y = rng.normal(size=60)  # pure noise: validation loss stops improving
    net, log = mlp_train(MlpSpec((2, 40, 40, 1)), TrainSpec(epochs=400, lr=1e-2, patience=5), X, Y)
    assert log.stopped_early
    assert len(log.val_loss) - 1 - log.best_epoch == 5


def test_initial_weights_returned_when_nothing_improves():
    X = np.random.default_rng(0).normal(size=(50, 1))
    Y = np.zeros(50)
    init = mlp_init(MlpSpec((1, 4, 1)), output_bias=[0.0], zero_output_weights=True)
    net, log = mlp_train(MlpSpec((1, 4, 1)), TrainSpec(epochs=3, patience=None), X, Y, init=init)
    assert log.best_epoch == 0
    assert np.all(mlp_predict(net, X) == 0.0)


def test_too_few_examples():
    with pytest.raises(ValueError):
        mlp_train(MlpSpec((1, 2, 1)), TrainSpec(), np.zeros(5), np.zeros(5))


def test_serialization_round_trip(tmp_path):
    net = _net()
    path = tmp_path / "net.json"
    save_mlp(net, path)
    back = load_mlp(path)
    X = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(mlp_predict(net, X), mlp_predict(back, X))
    with pytest.raises(ValueError):
        Mlp.from_dict({"format": "other", "version": 1})


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_rescaled_inputs_and_statistics_leave_outputs_unchanged(seed, scale):
    net = _net(seed=seed % 1000)
    X = np.random.default_rng(seed).normal(size=(5, 3))
    other = net.copy()
    other.x_mean = net.x_mean * scale
    other.x_std = net.x_std * scale
    assert np.allclose(mlp_predict(net, X), mlp_predict(other, X * scale), rtol=1e-12, atol=1e-12)


def test_zero_network_outputs_zero():
    net = mlp_init(MlpSpec((3, 4, 2)))
    for w, b in zip(net.weights, net.biases):
        w[:] = 0.0
        b[:] = 0.0
    assert np.array_equal(mlp_forward(net, [1.0, -2.0, 3.0]), np.zeros(2))


def test_identity_layer_returns_standardized_input():
    net = Mlp([np.eye(2), np.eye(2)], [np.zeros(2), np.zeros(2)], [1.0, 2.0], [2.0, 4.0])
    # inputs chosen so the standardized values are non-negative and pass the ReLU
    assert np.array_equal(mlp_forward(net, [5.0, 10.0]), [2.0, 2.0])


def test_zero_residual_gives_zero_gradient():
    net = _net()
    X = np.random.default_rng(3).normal(size=(6, 3))
    Y = mlp_predict(net, X)
    _, gw, gb = mlp_backward(net, X, Y, "squared")
    assert all(np.all(g == 0) for g in gw + gb)


def test_squared_loss_gradient_is_linear_in_residual():
    net = _net()
    rng = np.random.default_rng(4)
    X = rng.normal(size=(6, 3))
    P = mlp_predict(net, X)
    R = rng.normal(size=P.shape)
    _, gw1, _ = mlp_backward(net, X, P - R, "squared")
    _, gw3, _ = mlp_backward(net, X, P - 3.0 * R, "squared")
    for a, b in zip(gw1, gw3):
        assert np.allclose(b, 3.0 * a, rtol=1e-12, atol=1e-14)

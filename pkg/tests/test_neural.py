import json

import numpy as np
import pytest

from miencap.errors import DimensionError, FormatError, TrainingDivergedError
from miencap.neural import (
    Dataset,
    DenseLayer,
    NetworkModel,
    TrainConfig,
    backward,
    create_network,
    forward,
    forward_batch,
    gradient_check,
    load_model,
    loss_value,
    mse_loss,
    save_model,
    sgd_train,
    softmax_cross_entropy,
)

from conftest import FIXTURES


def identity_model(n):
    return NetworkModel([DenseLayer(np.eye(n), np.zeros(n), "identity")])


def forward_oracle(model, x):
    # naive per-neuron loops, independent of the vectorized path
    a = [float(v) for v in x]
    for layer in model.layers:
        out = []
        for i in range(layer.weights.shape[0]):
            s = float(layer.bias[i])
            for j in range(layer.weights.shape[1]):
                s += float(layer.weights[i, j]) * a[j]
            out.append(max(s, 0.0) if layer.activation == "relu" else s)
        a = out
    return np.array(a)


def test_forward_identity_layer():
    x = np.array([0.3, -1.2, 4.0])
    assert np.array_equal(forward(identity_model(3), x), x)


def test_forward_relu_clips_negative():
    model = NetworkModel([
        DenseLayer(np.array([[-1.0]]), np.zeros(1), "relu"),
        DenseLayer(np.eye(1), np.zeros(1), "identity"),
    ])
    assert forward(model, np.array([2.0]))[0] == 0.0


def test_forward_matches_loop_oracle():
    rng = np.random.default_rng(70)
    for seed in range(5):
        model = create_network([4, 7, 5, 3], seed=seed)
        for _ in range(10):
            x = rng.normal(size=4)
            assert np.max(np.abs(forward(model, x) - forward_oracle(model, x))) < 1e-12


def test_forward_batch_consistent_with_single():
    model = create_network([6, 10, 2], seed=9)
    rng = np.random.default_rng(71)
    X = rng.normal(size=(20, 6))
    Y = forward_batch(model, X)
    for i in range(20):
        # dgemm vs dgemv rounding may differ in the last ulp
        assert np.max(np.abs(Y[i] - forward(model, X[i]))) < 1e-12


def test_forward_dimension_error():
    with pytest.raises(DimensionError):
        forward(create_network([3, 2], seed=0), np.zeros(4))


def test_network_model_validation():
    with pytest.raises(Exception):
        # final layer must use the identity activation
        NetworkModel([DenseLayer(np.eye(2), np.zeros(2), "relu")])
    with pytest.raises(Exception):
        # chained dims must agree
        NetworkModel([
            DenseLayer(np.zeros((3, 2)), np.zeros(3), "relu"),
            DenseLayer(np.zeros((1, 4)), np.zeros(1), "identity"),
        ])


def test_mse_loss_values():
    assert mse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert mse_loss(np.array([1.0, 2.0]), np.zeros(2)) == 5.0
    r = np.array([0.3, -0.7, 1.1])
    assert mse_loss(2 * r, np.zeros(3)) == pytest.approx(4 * mse_loss(r, np.zeros(3)),
                                                         rel=1e-12)
    with pytest.raises(DimensionError):
        mse_loss(np.zeros(2), np.zeros(3))


def test_softmax_cross_entropy_values():
    onehot = np.zeros(7)
    onehot[3] = 1.0
    assert softmax_cross_entropy(np.zeros(7), onehot) == pytest.approx(np.log(7.0),
                                                                       abs=1e-12)
    rng = np.random.default_rng(72)
    z = rng.normal(size=7)
    t = rng.uniform(0, 1, size=7)
    assert abs(softmax_cross_entropy(z, t) - softmax_cross_entropy(z + 13.7, t)) < 1e-12
    assert softmax_cross_entropy(z, np.zeros(7)) == 0.0


def test_backward_zero_residual_mse():
    model = create_network([3, 4, 2], seed=1)
    x = np.array([0.1, 0.2, 0.3])
    target = forward(model, x)
    grads = backward(model, x, target, "mse")
    for dw, db in grads:
        assert np.max(np.abs(dw)) == 0.0
        assert np.max(np.abs(db)) == 0.0


def test_backward_single_linear_layer_closed_form():
    rng = np.random.default_rng(73)
    W = rng.normal(size=(2, 3))
    b = rng.normal(size=2)
    model = NetworkModel([DenseLayer(W.copy(), b.copy(), "identity")])
    x = rng.normal(size=3)
    t = rng.normal(size=2)
    r = W @ x + b - t
    [(dw, db)] = backward(model, x, t, "mse")
    assert np.max(np.abs(dw - 2.0 * np.outer(r, x))) < 1e-12
    assert np.max(np.abs(db - 2.0 * r)) < 1e-12


def test_gradient_check_random_models():
    rng = np.random.default_rng(74)
    for loss_kind in ("mse", "softmax_cross_entropy"):
        for seed in (0, 1):
            model = create_network([4, 6, 3], seed=seed)
            x = rng.normal(size=4)
            t = rng.uniform(0.1, 1.0, size=3)
            assert gradient_check(model, x, t, loss_kind) < 1e-4


def test_gradient_check_bias_only_edge():
    model = NetworkModel([DenseLayer(np.zeros((2, 2)), np.array([0.5, -0.5]),
                                     "identity")])
    err = gradient_check(model, np.zeros(2), np.ones(2), "mse")
    assert np.isfinite(err)


def test_corrupted_gradient_is_detectable():
    # inject +0.1 into one analytic weight gradient; relative error vs the
    # numeric gradient must blow past 1e-2 -- the checker has teeth
    model = create_network([3, 4, 2], seed=5)
    x = np.array([0.4, -0.2, 0.9])
    t = np.array([0.3, 0.6])
    grads = backward(model, x, t, "mse")
    g_a = grads[0][0][0, 0] + 0.1
    eps = 1e-5
    w = model.layers[0].weights
    orig = w[0, 0]
    w[0, 0] = orig + eps
    hi = loss_value(model, x, t, "mse")
    w[0, 0] = orig - eps
    lo = loss_value(model, x, t, "mse")
    w[0, 0] = orig
    g_n = (hi - lo) / (2 * eps)
    rel = abs(g_a - g_n) / max(1e-8, abs(g_a) + abs(g_n))
    assert rel > 1e-2


def test_sgd_zero_learning_rate_is_identity():
    model = create_network([2, 5, 1], seed=6)
    before = [(l.weights.copy(), l.bias.copy()) for l in model.layers]
    rng = np.random.default_rng(75)
    data = Dataset(rng.normal(size=(30, 2)), rng.normal(size=(30, 1)))
    trained, _ = sgd_train(model, data, TrainConfig(learning_rate=0.0, epochs=5),
                           "mse")
    for layer, (w0, b0) in zip(trained.layers, before):
        assert np.array_equal(layer.weights, w0)
        assert np.array_equal(layer.bias, b0)


def test_sgd_recovers_linear_map():
    rng = np.random.default_rng(76)
    X = rng.uniform(-1.0, 1.0, size=(100, 1))
    Y = 3.0 * X
    model = create_network([1, 1], seed=7)
    trained, curve = sgd_train(model, Dataset(X, Y),
                               TrainConfig(learning_rate=0.01, batch_size=10,
                                           epochs=200, seed=0), "mse")
    assert abs(trained.layers[0].weights[0, 0] - 3.0) < 1e-3
    assert abs(trained.layers[0].bias[0]) < 1e-3
    assert curve[-1] < curve[0]


def test_sgd_seed_determinism():
    rng = np.random.default_rng(77)
    data = Dataset(rng.normal(size=(64, 3)), rng.normal(size=(64, 2)))
    cfg = TrainConfig(epochs=10, seed=42)
    t1, c1 = sgd_train(create_network([3, 8, 2], seed=3), data, cfg, "mse")
    t2, c2 = sgd_train(create_network([3, 8, 2], seed=3), data, cfg, "mse")
    assert c1 == c2
    for l1, l2 in zip(t1.layers, t2.layers):
        assert np.array_equal(l1.weights, l2.weights)
        assert np.array_equal(l1.bias, l2.bias)


def test_sgd_does_not_mutate_input_model():
    model = create_network([2, 4, 1], seed=8)
    before = [l.weights.copy() for l in model.layers]
    rng = np.random.default_rng(78)
    sgd_train(model, Dataset(rng.normal(size=(20, 2)), rng.normal(size=(20, 1))),
              TrainConfig(epochs=3), "mse")
    for layer, w0 in zip(model.layers, before):
        assert np.array_equal(layer.weights, w0)


def test_sgd_divergence_carries_epoch():
    rng = np.random.default_rng(79)
    X = rng.normal(size=(40, 2)) * 10.0
    Y = rng.normal(size=(40, 1)) * 10.0
    with pytest.raises(TrainingDivergedError) as ei:
        with np.errstate(over="ignore", invalid="ignore"):
            sgd_train(create_network([2, 8, 1], seed=9), Dataset(X, Y),
                      TrainConfig(learning_rate=1e6, epochs=50), "mse")
    assert ei.value.epoch >= 0


def test_epoch_hook_sees_curve():
    rng = np.random.default_rng(80)
    data = Dataset(rng.normal(size=(20, 2)), rng.normal(size=(20, 1)))
    seen = []
    _, curve = sgd_train(create_network([2, 3, 1], seed=0), data,
                         TrainConfig(epochs=4), "mse",
                         hook=lambda e, l: seen.append((e, l)))
    assert [e for e, _ in seen] == [0, 1, 2, 3]
    assert [l for _, l in seen] == curve


def test_create_network_seeded_and_bounded():
    m1 = create_network([10, 20, 5], seed=11)
    m2 = create_network([10, 20, 5], seed=11)
    m3 = create_network([10, 20, 5], seed=12)
    for l1, l2 in zip(m1.layers, m2.layers):
        assert np.array_equal(l1.weights, l2.weights)
    assert any(not np.array_equal(l1.weights, l3.weights)
               for l1, l3 in zip(m1.layers, m3.layers))
    for layer, (fan_out, fan_in) in zip(m1.layers, [(20, 10), (5, 20)]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        assert np.max(np.abs(layer.weights)) <= bound
        assert np.max(np.abs(layer.bias)) == 0.0
    assert m1.metadata["creation_seed"] == 11


def test_save_load_round_trip(tmp_path):
    model = create_network([5, 9, 4], seed=13, metadata={"note": "round-trip"})
    p = tmp_path / "model.json"
    save_model(model, p)
    back = load_model(p)
    assert back.metadata["note"] == "round-trip"
    rng = np.random.default_rng(81)
    for _ in range(100):
        x = rng.normal(size=5)
        assert np.array_equal(forward(model, x), forward(back, x))


def test_load_model_truncated(tmp_path):
    model = create_network([3, 3, 2], seed=14)
    p = tmp_path / "model.json"
    save_model(model, p)
    text = p.read_text()
    p.write_text(text[: len(text) // 2])
    with pytest.raises(FormatError):
        load_model(p)


def test_load_model_version_mismatch(tmp_path):
    model = create_network([2, 2], seed=15)
    p = tmp_path / "model.json"
    save_model(model, p)
    doc = json.loads(p.read_text())
    doc["version"] = 99
    p.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        load_model(p)


def test_golden_model_fixture():
    # fixture generated once by save_model; output values frozen at creation
    model = load_model(FIXTURES / "model_golden.json")
    x = np.linspace(-1.0, 1.0, 4)
    got = forward(model, x)
    expect = np.array(json.loads((FIXTURES / "model_golden_output.json").read_text()))
    assert np.array_equal(got, expect)

import math

import numpy as np
import pytest

from conftest import rel_err
from ntkrecon.dynamics import (LabeledDataset, TrainConfig, TrainingDiverged, closed_form_alpha,
                               closed_form_delta_theta, encode_labels, mean_loss, scaled_learning_rate, train)
from ntkrecon.kernels import RidgePolicy, empirical_ntk, solve_alpha
from ntkrecon.network import Architecture, forward, init_params, param_gradient, param_jvp, param_vjp


def toy(n=6, d=4, w=16, c=1, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    ids = np.arange(n) % 2 if c == 1 else np.arange(n) % c
    Y = encode_labels("binary" if c == 1 else "multiclass", ids, num_classes=c)
    arch = Architecture(d, w, c)
    return arch, init_params(arch, seed), LabeledDataset(X, Y, ids)


def test_encode_labels():
    row = encode_labels("multiclass", [3])[0]
    assert row[3] == 0.9 and np.allclose(np.delete(row, 3), -0.1)
    assert encode_labels("binary", [1, 0]).ravel().tolist() == [1.0, -1.0]
    assert encode_labels("binary", [0], negative_label=-2.0)[0, 0] == -2.0
    with pytest.raises(ValueError):
        encode_labels("binary", [])
    with pytest.raises(ValueError):
        encode_labels("binary", [2])
    with pytest.raises(ValueError):
        encode_labels("multiclass", [10])
    with pytest.raises(ValueError):
        encode_labels("ternary", [0])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(0.0)
    with pytest.raises(ValueError):
        TrainConfig(0.1, momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(0.1, max_iters=0)
    with pytest.raises(ValueError):
        TrainConfig(0.1, dynamics="sgd")
    assert scaled_learning_rate(20) == pytest.approx(4e-6)


def test_one_step_matches_hand_update():
    arch, th, data = toy()
    lr = 0.01
    res = train(arch, th, data, TrainConfig(lr, momentum=0.0, max_iters=1, early_stop_loss=None))
    F = forward(arch, th, data.X)
    g = sum((F[i] - data.Y[i]) @ param_gradient(arch, th, data.X[i]) for i in range(len(data)))
    assert rel_err(res.params_final, th - lr * g) <= 1e-12


def test_first_step_same_for_both_dynamics():
    arch, th, data = toy()
    cfg = dict(learning_rate=0.01, max_iters=1, early_stop_loss=None)
    a = train(arch, th, data, TrainConfig(**cfg))
    b = train(arch, th, data, TrainConfig(**cfg, dynamics="linearized"))
    assert rel_err(a.params_final, b.params_final) <= 1e-14


def test_early_stop_infinite_threshold():
    arch, th, data = toy()
    res = train(arch, th, data, TrainConfig(0.01, max_iters=50, early_stop_loss=math.inf))
    assert res.stopped_at_iter == 1
    assert np.array_equal(res.params_final, th)
    assert res.loss_history


def test_divergence_guard():
    arch, th, data = toy()
    with pytest.raises(TrainingDiverged):
        train(arch, th, data, TrainConfig(50.0, max_iters=200))


def test_empty_dataset_rejected():
    arch, th, data = toy()
    with pytest.raises(ValueError):
        train(arch, th, data.subset([]), TrainConfig(0.01))


def test_closed_form_properties():
    arch, th, data = toy()
    dth = closed_form_delta_theta(arch, th, data, RidgePolicy.none())
    # interpolation constraint of the linearised model
    F0 = forward(arch, th, data.X)
    assert rel_err(param_jvp(arch, th, data.X, dth), data.Y - F0) <= 1e-8
    zero = LabeledDataset(data.X, F0, data.class_ids)
    assert np.linalg.norm(closed_form_delta_theta(arch, th, zero)) <= 1e-12
    one = data.subset([0])
    g = param_gradient(arch, th, one.X[0])[0]
    f = forward(arch, th, one.X[0])
    expected = g * (one.Y[0, 0] - f[0]) / (g @ g)
    assert rel_err(closed_form_delta_theta(arch, th, one, RidgePolicy.none()), expected) <= 1e-10


def test_linearized_training_matches_closed_form():
    arch, th, data = toy(n=4, d=3, w=8)
    res = train(arch, th, data, TrainConfig(0.05, max_iters=20000, early_stop_loss=1e-14, dynamics="linearized"))
    assert res.final_loss < 1e-12
    closed = closed_form_delta_theta(arch, th, data, RidgePolicy.none())
    assert rel_err(res.delta_theta, closed) <= 1e-3
    # the dual accumulator reproduces the parameter change exactly in linearised mode
    assert rel_err(param_vjp(arch, th, data.X, res.alpha_integral), res.delta_theta) <= 1e-10
    alpha = solve_alpha(empirical_ntk(arch, th, data.X), data.Y - forward(arch, th, data.X), RidgePolicy.none())
    assert rel_err(res.alpha_integral, alpha) <= 1e-3


def test_linearized_loss_monotone():
    # heavy ball is overdamped, hence monotone, while lr * lambda_max <= (1 - sqrt(m))^2
    arch, th, data = toy(n=10, d=5, w=32)
    lam = np.linalg.eigvalsh(empirical_ntk(arch, th, data.X)).max()
    lr = 0.9 * (1 - np.sqrt(0.9)) ** 2 / lam
    assert scaled_learning_rate(10) <= lr
    res = train(arch, th, data, TrainConfig(lr, max_iters=3000, log_every=10,
                                            dynamics="linearized", early_stop_loss=None))
    losses = [l for _, l in res.loss_history]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(losses, losses[1:]))


def test_multiclass_closed_form_alpha():
    arch, th, data = toy(n=6, c=3, w=12)
    alpha = closed_form_alpha(arch, th, data, RidgePolicy.none())
    assert alpha.shape == (6, 3)
    dth = closed_form_delta_theta(arch, th, data, RidgePolicy.none())
    assert rel_err(param_jvp(arch, th, data.X, dth), data.Y - forward(arch, th, data.X)) <= 1e-8


def test_mean_loss():
    assert mean_loss(np.zeros((2, 1)), np.ones((2, 1))) == pytest.approx(0.5)

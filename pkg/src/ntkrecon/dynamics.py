"""Full-batch MSE training under standard or linearised dynamics."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import DEFAULT_RIDGE, RidgePolicy, empirical_ntk_blocks, solve_psd
from .network import Architecture, _Cache, _jvp_from_cache, _vjp_from_cache, unflatten

log = logging.getLogger(__name__)

MULTICLASS_ON = 0.9
MULTICLASS_OFF = -0.1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LabeledDataset:
    """Flat images with encoded labels.  ``normalization`` records how the
    pixels were produced so that exports can invert it."""
    X: np.ndarray
    Y: np.ndarray
    class_ids: np.ndarray
    normalization: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        self.class_ids = np.asarray(self.class_ids)
        if not (len(self.X) == len(self.Y) == len(self.class_ids)):
            raise ValueError("images, labels and class ids must have the same length")

    def __len__(self):
        return len(self.X)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=int)
        return LabeledDataset(self.X[idx], self.Y[idx], self.class_ids[idx], dict(self.normalization))


def encode_labels(task: str, class_ids, num_classes: int = 10, negative_label: float = -1.0) -> np.ndarray:
    """Label matrix for a task.

    binary: ``class_ids`` are side indicators (1 positive, 0 negative) and the
    result is a single column of +1 / ``negative_label``.
    multiclass: 0.9 on the true class and -0.1 elsewhere.
    """
    ids = np.asarray(class_ids)
    if ids.size == 0:
        raise ValueError("cannot encode an empty dataset")
    if task == "binary":
        if not np.isin(ids, (0, 1)).all():
            raise ValueError(f"binary class ids must be 0 or 1, got {np.unique(ids)}")
        return np.where(ids == 1, 1.0, negative_label)[:, None]
    if task == "multiclass":
        if ids.min() < 0 or ids.max() >= num_classes:
            raise ValueError(f"class ids outside [0, {num_classes})")
        Y = np.full((len(ids), num_classes), MULTICLASS_OFF)
        Y[np.arange(len(ids)), ids] = MULTICLASS_ON
        return Y
    raise ValueError(f"unknown task {task!r}")


@dataclass
class TrainConfig:
    learning_rate: float
    momentum: float = 0.9
    max_iters: int = 1_000_000
    early_stop_loss: float | None = 1e-10
    dynamics: str = "standard"
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.dynamics not in ("standard", "linearized"):
            raise ValueError(f"unknown dynamics {self.dynamics!r}")


def scaled_learning_rate(n: int, per_example: float = 2e-7) -> float:
    return n * per_example


@dataclass
class TrainResult:
    params_init: np.ndarray
    params_final: np.ndarray
    loss_history: list          # (iteration, mean loss)
    alpha_integral: np.ndarray  # (N, C)
    stopped_at_iter: int
    final_loss: float

    @property
    def delta_theta(self) -> np.ndarray:
        return self.params_final - self.params_init


def mean_loss(F, Y) -> float:
    return 0.5 * float(np.sum((F - Y) ** 2)) / len(Y)


def train(arch: Architecture, theta0, data: LabeledDataset, cfg: TrainConfig) -> TrainResult:
    """Heavy-ball gradient descent on 1/2 sum_i ||y_i - f(x_i)||^2.

    Velocity update ``v <- m v + g``, ``theta <- theta - lr v``.  Linearised
    mode evaluates the first-order expansion about ``theta0`` with JVPs, so the
    tangent features are never stored.

    ``alpha_integral`` follows the same momentum recursion driven by the output
    residuals; in linearised mode ``theta - theta0 = J0^T alpha_integral`` holds
    exactly at every step.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    X, Y = data.X, data.Y
    if X.shape[1] != arch.input_dim or Y.shape[1] != arch.output_dim:
        raise ValueError("dataset dimensions do not match the architecture")
    lr, m = cfg.learning_rate, cfg.momentum
    theta0 = np.array(theta0, dtype=np.float64)
    theta = theta0.copy()
    layers0 = unflatten(arch, theta0)
    cache0 = _Cache(arch, layers0, X)
    linear = cfg.dynamics == "linearized"

    vel = np.zeros_like(theta)
    alpha = np.zeros_like(Y)
    alpha_vel = np.zeros_like(Y)
    history = []
    initial = None
    stopped = cfg.max_iters
    threshold = cfg.early_stop_loss

    def outputs(theta):
        if linear:
            return cache0, layers0, cache0.out + _jvp_from_cache(arch, layers0, cache0, theta - theta0)
        layers = unflatten(arch, theta)
        cache = _Cache(arch, layers, X)
        return cache, layers, cache.out

    for it in range(1, cfg.max_iters + 1):
        cache, layers, F = outputs(theta)
        resid = F - Y
        loss = mean_loss(F, Y)
        if initial is None:
            initial = max(loss, 1e-300)
        if not math.isfinite(loss) or loss > 1e6 * initial:
            raise TrainingDiverged(f"loss {loss:.3e} at iteration {it} (initial {initial:.3e})")
        if it == 1 or it % cfg.log_every == 0:
            history.append((it, loss))
        if threshold is not None and loss < threshold:
            stopped = it
            break
        g = _vjp_from_cache(layers, cache, resid)
        vel *= m
        vel += g
        theta -= lr * vel
        alpha_vel = m * alpha_vel + resid
        alpha -= lr * alpha_vel

    final = mean_loss(outputs(theta)[2], Y)
    if not history or history[-1][0] != stopped:
        history.append((stopped, final))
    log.debug("training stopped at %d with loss %.3e", stopped, final)
    return TrainResult(theta0, theta, history, alpha, stopped, final)


def closed_form_alpha(arch: Architecture, theta0, data: LabeledDataset,
                      ridge: RidgePolicy = DEFAULT_RIDGE) -> np.ndarray:
    """Dual coefficients K0^{-1} (y - f0) using the full per-class kernel; (N, C)."""
    X, Y = data.X, data.Y
    n, C = Y.shape
    K = empirical_ntk_blocks(arch, theta0, X).reshape(n * C, n * C)
    F0 = _Cache(arch, unflatten(arch, theta0), X).out
    return solve_psd(K, (Y - F0).reshape(-1), ridge).reshape(n, C)


def closed_form_delta_theta(arch: Architecture, theta0, data: LabeledDataset,
                            ridge: RidgePolicy = DEFAULT_RIDGE) -> np.ndarray:
    """Least-norm parameter change that interpolates the training labels in
    the linearised model: J0^T K0^{-1} (y - f0)."""
    alpha = closed_form_alpha(arch, theta0, data, ridge)
    layers0 = unflatten(arch, theta0)
    return _vjp_from_cache(layers0, _Cache(arch, layers0, data.X), alpha)

"""Kernel inducing point distillation (KIP), its reconstruction-derived
variant (RKIP) and retraining evaluation of distilled sets."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .attack import Adam
from .dynamics import LabeledDataset, TrainConfig, train
from .kernels import (DEFAULT_RIDGE, KernelSolver, RidgePolicy, analytic_ntk, analytic_ntk_vjp,
                      empirical_ntk, kernel_regression_predict)
from .network import Architecture, _Cache, _jvp_from_cache, init_params, param_vjp, unflatten, vjp_pullback

log = logging.getLogger(__name__)


@dataclass
class DistilledSet:
    images: np.ndarray
    labels: np.ndarray
    labels_trainable: bool = False
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.labels.ndim == 1:
            self.labels = self.labels[:, None]
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels must have the same length")
        if not (np.isfinite(self.images).all() and np.isfinite(self.labels).all()):
            raise ValueError("distilled set has non-finite entries")

    def __len__(self):
        return len(self.images)

    def as_dataset(self) -> LabeledDataset:
        return LabeledDataset(self.images, self.labels, np.zeros(len(self), dtype=int))


# ---------------------------------------------------------------------------
# losses

def _col(y):
    y = np.asarray(y, dtype=np.float64)
    return y[:, None] if y.ndim == 1 else y


class KIPGrads(NamedTuple):
    value: float
    K_TS: np.ndarray
    K_SS: np.ndarray
    y_S: np.ndarray


def kip_loss_and_grads(K_TS, K_SS, y_T, y_S, ridge: RidgePolicy = DEFAULT_RIDGE) -> KIPGrads:
    """1/2 ||y_T - K_TS (K_SS + ridge)^-1 y_S||^2 with cotangents on its inputs.

    The ridge amount is treated as a constant when differentiating.
    """
    K_TS = np.asarray(K_TS, dtype=np.float64)
    y_T, y_S = _col(y_T), _col(y_S)
    if K_TS.shape != (len(y_T), len(y_S)):
        raise ValueError(f"K_TS has shape {K_TS.shape}, expected {(len(y_T), len(y_S))}")
    solver = KernelSolver(K_SS, ridge)
    a_S = solver.solve(y_S)
    r = y_T - K_TS @ a_S
    value = 0.5 * float(np.sum(r * r))
    g_a = -K_TS.T @ r
    g_y = solver.solve(g_a)
    return KIPGrads(value, -r @ a_S.T, -g_y @ a_S.T, g_y)


def kip_loss(K_TS, K_SS, y_T, y_S, ridge: RidgePolicy = DEFAULT_RIDGE) -> float:
    return kip_loss_and_grads(K_TS, K_SS, y_T, y_S, ridge).value


class RKIPTerms(NamedTuple):
    total: float
    label_matching: float
    variance_term: float


class RKIPGrads(NamedTuple):
    terms: RKIPTerms
    K_TR: np.ndarray
    K_RR: np.ndarray
    y_R: np.ndarray


def _rkip(K_TT, K_TR, K_RR, y_T, y_R, ridge, need_grads, tt_solver=None):
    K_TR = np.asarray(K_TR, dtype=np.float64)
    K_RR = np.asarray(K_RR, dtype=np.float64)
    y_T, y_R = _col(y_T), _col(y_R)
    if K_TR.shape != (len(y_T), len(y_R)):
        raise ValueError(f"K_TR has shape {K_TR.shape}, expected {(len(y_T), len(y_R))}")
    tt = tt_solver if tt_solver is not None else KernelSolver(K_TT, ridge)
    rr = KernelSolver(K_RR, ridge)
    a_T = tt.solve(y_T)
    a_R = rr.solve(y_R)
    r = y_T - K_TR @ a_R
    label = float(np.sum(r * tt.solve(r)))
    # variance: a_R^T (K_RR - K_RT K_TT^-1 K_TR) a_R
    u = K_TR @ a_R
    variance = float(np.sum(a_R * (K_RR @ a_R)) - np.sum(u * tt.solve(u)))
    total = float(np.sum(y_T * a_T) - 2 * np.sum(a_T * (K_TR @ a_R)) + np.sum(a_R * (K_RR @ a_R)))
    terms = RKIPTerms(total, label, variance)
    if not need_grads:
        return terms
    g_a = -2 * K_TR.T @ a_T + 2 * K_RR @ a_R
    g_y = rr.solve(g_a)
    g_KRR = a_R @ a_R.T - g_y @ a_R.T
    return RKIPGrads(terms, -2 * a_T @ a_R.T, g_KRR, g_y)


def rkip_loss(K_TT, K_TR, K_RR, y_T, y_R, ridge: RidgePolicy = DEFAULT_RIDGE) -> RKIPTerms:
    """RKHS distance between the kernel regressors fitted to (T, y_T) and (R, y_R).

    ``total`` is computed by Gram expansion
    a^T K_TT a - 2 a^T K_TR a_R + a_R^T K_RR a_R  (a = K_TT^-1 y_T, a_R = K_RR^-1 y_R);
    it splits into the label-matching term ||y_T - K_TR a_R||^2 in the K_TT^-1
    norm plus the conditional-variance term a_R^T (K_RR - K_RT K_TT^-1 K_TR) a_R.
    Multi-column labels sum over columns.
    """
    return _rkip(K_TT, K_TR, K_RR, y_T, y_R, ridge, False)


def rkip_loss_and_grads(K_TT, K_TR, K_RR, y_T, y_R, ridge: RidgePolicy = DEFAULT_RIDGE,
                        tt_solver: KernelSolver | None = None) -> RKIPGrads:
    """Total loss with cotangents on K_TR, K_RR and y_R; K_TT is held fixed."""
    return _rkip(K_TT, K_TR, K_RR, y_T, y_R, ridge, True, tt_solver)


def rkip_finite_labels(K_RR, alpha_R) -> np.ndarray:
    """Retraining labels K_RR alpha_R for an attack output."""
    return np.asarray(K_RR, dtype=np.float64) @ _col(alpha_R)


# ---------------------------------------------------------------------------
# kernels with input gradients

class AnalyticKernel:
    """Infinite-width ReLU NTK with the given weight and bias variances."""
    name = "analytic"

    def __init__(self, weight_variance: float = 1.0, bias_variance: float = 1.0):
        self.weight_variance, self.bias_variance = weight_variance, bias_variance

    def __call__(self, XA, XB=None):
        return analytic_ntk(XA, XB, self.weight_variance, self.bias_variance)

    def vjp(self, XA, XB, G, same=False):
        """Gradient of sum(G * K(XA, XB)) with respect to XB (or X when same)."""
        return analytic_ntk_vjp(XA, XB, G, same=same, wrt="b", weight_variance=self.weight_variance,
                                bias_variance=self.bias_variance)[1]


class EmpiricalKernel:
    """Finite-width tangent kernel at fixed parameters.

    Input gradients go through the mixed second derivative of the network, so
    the architecture must use softplus.  Costs one parameter VJP per
    (distilled point, class) pair.
    """
    name = "empirical"

    def __init__(self, arch: Architecture, params):
        self.arch, self.params = arch, np.asarray(params, dtype=np.float64)

    def __call__(self, XA, XB=None):
        return empirical_ntk(self.arch, self.params, XA, XB)

    def vjp(self, XA, XB, G, same=False):
        G = np.asarray(G, dtype=np.float64)
        if same:
            XA, G = XB, G + G.T
        C = self.arch.output_dim
        eye = np.eye(C)
        out = np.zeros_like(XB, dtype=np.float64)
        for b in range(len(XB)):
            for c in range(C):
                r = param_vjp(self.arch, self.params, XA, np.outer(G[:, b], eye[c]))
                dX, _ = vjp_pullback(self.arch, self.params, XB[b:b + 1], eye[c][None], r)
                out[b] += dX[0]
        return out


@dataclass
class DistillConfig:
    loss: str = "rkip"
    m: int = 20
    iters: int = 50_000
    lr: float = 0.001
    image_init_std: float = 0.2
    learn_labels: bool = False
    ridge: RidgePolicy = DEFAULT_RIDGE
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.loss not in ("kip", "rkip"):
            raise ValueError(f"unknown distillation loss {self.loss!r}")
        if self.m < 1 or self.iters < 0:
            raise ValueError("need m >= 1 and iters >= 0")


def balanced_labels(data: LabeledDataset, m: int) -> np.ndarray:
    """Labels for m distilled points, cycling through the classes present."""
    classes = np.unique(data.class_ids)
    rows = [data.Y[np.flatnonzero(data.class_ids == classes[i % len(classes)])[0]] for i in range(m)]
    return np.array(rows)


def distill(data: LabeledDataset, cfg: DistillConfig, kernel=None, init=None) -> tuple[DistilledSet, list]:
    """Optimise m synthetic points so that kernel regression on them matches
    the training set.  Returns the distilled set and the loss history.

    ``init`` may be a DistilledSet to start from; otherwise images are Gaussian
    with the configured standard deviation and labels are class balanced.
    """
    kernel = kernel if kernel is not None else AnalyticKernel()
    N = len(data)
    if cfg.loss == "rkip" and cfg.m > N:
        raise ValueError(f"RKIP needs m <= N ({cfg.m} > {N})")
    rng = np.random.default_rng(cfg.seed)
    if init is None:
        images = cfg.image_init_std * rng.standard_normal((cfg.m, data.X.shape[1]))
        labels = balanced_labels(data, cfg.m)
    else:
        images, labels = init.images.copy(), init.labels.copy()
    params = {"images": images, "labels": labels}
    opt = Adam(params, cfg.lr)
    X_T, y_T = data.X, data.Y
    tt = KernelSolver(kernel(X_T), cfg.ridge) if cfg.loss == "rkip" else None
    history = []

    def evaluate():
        X_S, y_S = params["images"], params["labels"]
        K_TS = kernel(X_T, X_S)
        K_SS = kernel(X_S)
        if cfg.loss == "kip":
            v, gTS, gSS, gy = kip_loss_and_grads(K_TS, K_SS, y_T, y_S, cfg.ridge)
        else:
            terms, gTS, gSS, gy = rkip_loss_and_grads(None, K_TS, K_SS, y_T, y_S, cfg.ridge, tt)
            v = terms.total
        return v, gTS, gSS, gy

    for it in range(cfg.iters):
        v, gTS, gSS, gy = evaluate()
        if not np.isfinite(v):
            raise FloatingPointError(f"distillation loss became {v} at iteration {it}")
        if it % cfg.log_every == 0:
            history.append((it, v))
        X_S = params["images"]
        g_img = kernel.vjp(X_T, X_S, gTS) + kernel.vjp(X_S, X_S, gSS, same=True)
        grads = {"images": g_img}
        if cfg.learn_labels:
            grads["labels"] = gy
        opt.step(params, grads)
    history.append((cfg.iters, evaluate()[0]))
    meta = {"loss": cfg.loss, "kernel": kernel.name, "seed": cfg.seed, "iters": cfg.iters,
            "labels": "learned" if cfg.learn_labels else "fixed"}
    return DistilledSet(params["images"], params["labels"], cfg.learn_labels, meta), history


# ---------------------------------------------------------------------------
# evaluation

def accuracy(pred, Y) -> float:
    """Sign agreement for one output column, argmax agreement otherwise."""
    pred, Y = _col(pred), _col(Y)
    if len(Y) == 0:
        raise ValueError("empty test set")
    if Y.shape[1] == 1:
        return float(np.mean(np.sign(pred[:, 0]) == np.sign(Y[:, 0])))
    return float(np.mean(pred.argmax(1) == Y.argmax(1)))


@dataclass
class FiniteEval:
    arch: Architecture
    dynamics: str = "standard"
    max_iters: int = 1_000_000
    lr_per_example: float = 6e-6
    early_stop_loss: float = 1e-10


def retrain_eval(distilled: DistilledSet, mode, test: LabeledDataset, seed: int = 0,
                 ridge: RidgePolicy = DEFAULT_RIDGE, kernel=None) -> float:
    """Test accuracy of a model fitted to the distilled set.

    ``mode`` is "infinite" (regression with ``kernel``, default the analytic
    NTK) or a :class:`FiniteEval` describing a fresh network trained with
    learning rate M * lr_per_example.
    """
    if len(test) == 0:
        raise ValueError("empty test set")
    if mode == "infinite":
        kernel = kernel if kernel is not None else AnalyticKernel()
        pred = kernel_regression_predict(kernel(test.X, distilled.images), kernel(distilled.images),
                                         distilled.labels, ridge)
        return accuracy(pred, test.Y)
    if not isinstance(mode, FiniteEval):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    arch = mode.arch
    theta0 = init_params(arch, seed)
    cfg = TrainConfig(learning_rate=len(distilled) * mode.lr_per_example, max_iters=mode.max_iters,
                      early_stop_loss=mode.early_stop_loss, dynamics=mode.dynamics, seed=seed)
    res = train(arch, theta0, distilled.as_dataset(), cfg)
    layers0 = unflatten(arch, theta0)
    if mode.dynamics == "linearized":
        cache = _Cache(arch, layers0, test.X)
        pred = cache.out + _jvp_from_cache(arch, layers0, cache, res.delta_theta)
    else:
        pred = _Cache(arch, unflatten(arch, res.params_final), test.X).out
    return accuracy(pred, test.Y)

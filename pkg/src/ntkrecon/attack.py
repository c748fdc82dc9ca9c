"""Dataset reconstruction from a parameter difference.

The attack searches for images X and dual coefficients a such that the
parameter change is explained by tangent features of the reconstructions:

    L = || delta_theta - sum_j sum_c a_jc grad_theta f_c(x_j) ||^2

It is optimised with Adam while the softplus temperature is annealed towards
ReLU.  ``run_attack`` optimises the full set every step; ``run_attack_batched``
keeps a buffered total of the tangent sum and updates one batch at a time.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .network import ActivationError, Architecture, _Cache, _pullback_from_cache, _vjp_from_cache, unflatten

log = logging.getLogger(__name__)

KERNEL_CHOICES = ("final", "initial", "hybrid")


class AttackDiverged(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class ReconstructionSet:
    images: np.ndarray
    duals: np.ndarray
    duals_initial: np.ndarray | None = None   # second bank, hybrid loss only

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.duals = np.asarray(self.duals, dtype=np.float64)
        if self.duals.ndim == 1:
            self.duals = self.duals[:, None]
        if len(self.images) < 1 or len(self.images) != len(self.duals):
            raise ValueError("need at least one reconstruction and one dual row per image")

    def copy(self) -> "ReconstructionSet":
        return ReconstructionSet(self.images.copy(), self.duals.copy(),
                                 None if self.duals_initial is None else self.duals_initial.copy())

    def __len__(self):
        return len(self.images)


@dataclass
class AttackConfig:
    m: int = 40
    iters: int = 80_000
    adam_lr: float = 0.02
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    image_init_std: float = 0.2
    dual_init_range: tuple = (-0.5, 0.5)
    temp_start: float = 10.0
    temp_end: float = 200.0
    temp_update_every: int = 1
    kernel_choice: str = "final"
    batch_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.m < 1 or self.iters < 0 or not self.adam_lr > 0:
            raise ValueError("attack needs m >= 1, iters >= 0 and a positive learning rate")
        if self.kernel_choice not in KERNEL_CHOICES:
            raise ValueError(f"unknown kernel choice {self.kernel_choice!r}")
        if self.batch_size is not None and not 1 <= self.batch_size <= self.m:
            raise ValueError("batch_size must lie in [1, m]")
        if self.temp_start <= 0 or self.temp_end <= 0 or self.temp_update_every < 1:
            raise ValueError("temperatures must be positive")


@dataclass
class AttackTrace:
    loss_history: np.ndarray
    temperatures: np.ndarray
    best: ReconstructionSet
    best_loss: float
    best_iter: int
    final: ReconstructionSet
    final_loss: float
    audits: list = field(default_factory=list)   # (iter, relative buffer error), batched only


def temperature_at(it: int, cfg: AttackConfig) -> float:
    """Linear anneal from temp_start at iteration 0 to temp_end at cfg.iters."""
    if cfg.iters == 0:
        return cfg.temp_start
    it = (min(it, cfg.iters) // cfg.temp_update_every) * cfg.temp_update_every
    return cfg.temp_start + (cfg.temp_end - cfg.temp_start) * it / cfg.iters


def _banks(recon: ReconstructionSet, theta_eval, choice):
    """Pair each dual bank with the parameters whose tangent features it weights."""
    if choice == "hybrid":
        theta_f, theta_0 = theta_eval
        d0 = recon.duals_initial if recon.duals_initial is not None else np.zeros_like(recon.duals)
        return [(np.asarray(theta_f), recon.duals), (np.asarray(theta_0), d0)]
    if choice not in KERNEL_CHOICES:
        raise ValueError(f"unknown kernel choice {choice!r}")
    return [(np.asarray(theta_eval), recon.duals)]


@dataclass
class LossEval:
    value: float
    grad_images: np.ndarray
    grad_duals: list          # one array per bank
    residual: np.ndarray      # delta_theta - G


def tangent_sum(arch: Architecture, recon: ReconstructionSet, theta_eval, choice="final", rows=None):
    """G = sum over banks and images of duals^T grad_theta f(x)."""
    X = recon.images if rows is None else recon.images[rows]
    G = 0.0
    for theta, duals in _banks(recon, theta_eval, choice):
        U = duals if rows is None else duals[rows]
        layers = unflatten(arch, theta)
        G = G + _vjp_from_cache(layers, _Cache(arch, layers, X), U)
    return G


def recon_loss(delta_theta, recon: ReconstructionSet, arch: Architecture, theta_eval,
               choice: str = "final", rows=None, base=None) -> LossEval:
    """Reconstruction loss and its gradients with respect to images and duals.

    ``rows`` restricts the differentiable part to a subset; ``base`` is then the
    (constant) tangent sum of every other reconstruction.
    """
    if arch.activation != "softplus":
        raise ActivationError("the reconstruction loss needs the softplus activation")
    X = recon.images if rows is None else recon.images[rows]
    banks = _banks(recon, theta_eval, choice)
    parts = []
    G = 0.0 if base is None else base
    for theta, duals in banks:
        U = duals if rows is None else duals[rows]
        layers = unflatten(arch, theta)
        cache = _Cache(arch, layers, X)
        G = G + _vjp_from_cache(layers, cache, U)
        parts.append((layers, cache, U))
    R = np.asarray(delta_theta) - G
    value = float(R @ R)
    r = -2.0 * R
    dX = np.zeros_like(X)
    dU = []
    for layers, cache, U in parts:
        gx, gu = _pullback_from_cache(arch, layers, cache, U, r)
        dX += gx
        dU.append(gu)
    return LossEval(value, dX, dU, R)


class Adam:
    """Adam over a dict of arrays; ``rows`` restricts an update to a subset of rows."""

    def __init__(self, params: dict, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, rows=None):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            sl = slice(None) if rows is None else rows
            m = self.m[k][sl] = self.b1 * self.m[k][sl] + (1 - self.b1) * g
            v = self.v[k][sl] = self.b2 * self.v[k][sl] + (1 - self.b2) * g * g
            params[k][sl] = params[k][sl] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def init_reconstruction(arch: Architecture, cfg: AttackConfig) -> ReconstructionSet:
    rng = np.random.default_rng(cfg.seed)
    images = cfg.image_init_std * rng.standard_normal((cfg.m, arch.input_dim))
    lo, hi = cfg.dual_init_range
    duals = rng.uniform(lo, hi, (cfg.m, arch.output_dim))
    extra = rng.uniform(lo, hi, (cfg.m, arch.output_dim)) if cfg.kernel_choice == "hybrid" else None
    return ReconstructionSet(images, duals, extra)


def _as_dict(recon):
    d = {"images": recon.images, "duals": recon.duals}
    if recon.duals_initial is not None:
        d["duals_initial"] = recon.duals_initial
    return d


def _grads(ev: LossEval, recon):
    g = {"images": ev.grad_images, "duals": ev.grad_duals[0]}
    if recon.duals_initial is not None:
        g["duals_initial"] = ev.grad_duals[1]
    return g


class _Tracker:
    def __init__(self, recon, iters):
        self.losses = np.empty(iters)
        self.temps = np.empty(iters)
        self.best, self.best_loss, self.best_iter = recon.copy(), math.inf, -1

    def record(self, it, loss, temp, recon):
        self.losses[it] = loss
        self.temps[it] = temp
        if not math.isfinite(loss):
            raise AttackDiverged(f"non-finite reconstruction loss at iteration {it}",
                                 self.trace(it, recon, loss))
        if loss < self.best_loss:
            self.best, self.best_loss, self.best_iter = recon.copy(), loss, it

    def trace(self, n, recon, final_loss, audits=()):
        return AttackTrace(self.losses[:n].copy(), self.temps[:n].copy(), self.best, self.best_loss,
                           self.best_iter, recon.copy(), final_loss, list(audits))

    def finish(self, n, recon, final_loss, audits=()):
        if final_loss < self.best_loss:
            self.best, self.best_loss, self.best_iter = recon.copy(), final_loss, n
        return self.trace(n, recon, final_loss, audits)


def _check(arch, delta_theta, cfg):
    if np.asarray(delta_theta).shape != (arch.num_params,):
        raise ValueError("delta_theta does not match the architecture")
    if cfg.kernel_choice not in KERNEL_CHOICES:
        raise ValueError(cfg.kernel_choice)


def run_attack(delta_theta, arch: Architecture, theta_eval, cfg: AttackConfig,
               init: ReconstructionSet | None = None, callback=None) -> AttackTrace:
    """Optimise every reconstruction at every step."""
    _check(arch, delta_theta, cfg)
    recon = (init or init_reconstruction(arch, cfg)).copy()
    params = _as_dict(recon)
    opt = Adam(params, cfg.adam_lr, cfg.betas, cfg.eps)
    tracker = _Tracker(recon, cfg.iters)
    for it in range(cfg.iters):
        temp = temperature_at(it, cfg)
        ev = recon_loss(delta_theta, recon, arch.with_temperature(temp), theta_eval, cfg.kernel_choice)
        tracker.record(it, ev.value, temp, recon)
        opt.step(params, _grads(ev, recon))
        if callback is not None:
            callback(it, ev.value, recon)
    final = recon_loss(delta_theta, recon, arch.with_temperature(temperature_at(cfg.iters, cfg)),
                       theta_eval, cfg.kernel_choice).value
    return tracker.finish(cfg.iters, recon, final)


def run_attack_batched(delta_theta, arch: Architecture, theta_eval, cfg: AttackConfig,
                       init: ReconstructionSet | None = None, audit_every: int = 0) -> AttackTrace:
    """Buffered variant: only a uniformly sampled batch is differentiated per step.

    The buffer ``G_R`` holds the tangent sum of all reconstructions.  Each step
    swaps the batch's old contribution for its freshly computed one.  Whenever
    the annealed temperature changes the buffer is rebuilt batch by batch, so
    its contents always correspond to one temperature.  With
    ``batch_size == m`` every step reproduces :func:`run_attack` exactly.
    """
    _check(arch, delta_theta, cfg)
    B = cfg.batch_size or cfg.m
    recon = (init or init_reconstruction(arch, cfg)).copy()
    M = len(recon)
    if B > M:
        raise ValueError("batch larger than the reconstruction set")
    params = _as_dict(recon)
    opt = Adam(params, cfg.adam_lr, cfg.betas, cfg.eps)
    tracker = _Tracker(recon, cfg.iters)
    sampler = np.random.default_rng([cfg.seed, 1])
    choice = cfg.kernel_choice
    audits = []

    def rebuild(a):
        G = 0.0
        for start in range(0, M, B):
            G = G + tangent_sum(a, recon, theta_eval, choice, rows=np.arange(start, min(start + B, M)))
        return G

    buffer_temp = temperature_at(0, cfg)
    G_R = rebuild(arch.with_temperature(buffer_temp))
    for it in range(cfg.iters):
        temp = temperature_at(it, cfg)
        a = arch.with_temperature(temp)
        if temp != buffer_temp:
            G_R, buffer_temp = rebuild(a), temp
        rows = np.sort(sampler.choice(M, size=B, replace=False))
        # the batch's own (current) contribution is part of G_R; removing it and
        # adding back the differentiable copy leaves the value unchanged
        G_B = tangent_sum(a, recon, theta_eval, choice, rows=rows)
        ev = recon_loss(delta_theta, recon, a, theta_eval, choice, rows=rows, base=G_R - G_B)
        tracker.record(it, ev.value, temp, recon)
        grads = {"images": ev.grad_images, "duals": ev.grad_duals[0]}
        if recon.duals_initial is not None:
            grads["duals_initial"] = ev.grad_duals[1]
        opt.step(params, grads, rows=rows)
        G_new = tangent_sum(a, recon, theta_eval, choice, rows=rows)
        G_R = G_R - G_B + G_new
        if audit_every and (it + 1) % audit_every == 0:
            fresh = tangent_sum(a, recon, theta_eval, choice)
            audits.append((it + 1, float(np.linalg.norm(G_R - fresh) / max(np.linalg.norm(fresh), 1e-300))))
    final_temp = temperature_at(cfg.iters, cfg)
    final = recon_loss(delta_theta, recon, arch.with_temperature(final_temp), theta_eval, choice).value
    return tracker.finish(cfg.iters, recon, final, audits)

"""Two-hidden-layer fully connected network with closed-form derivatives.

The network is ``f(x) = W3 s(W2 s(W1 x + b1) + b2) + b3`` where ``s`` is ReLU
or a temperature-scaled softplus.  Parameters live in one flat vector in the
order W1, b1, W2, b2, W3, b3, each weight stored row-major with shape
(fan_out, fan_in).

Every function accepts a single input of shape (d,) or a batch of shape (n, d).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import stats
from scipy.special import expit


class ActivationError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    width: int
    output_dim: int = 1
    activation: str = "relu"
    temperature: float = 1.0

    def __post_init__(self):
        if self.input_dim < 1 or self.width < 1 or self.output_dim < 1:
            raise ValueError(f"dimensions must be >= 1, got {self}")
        if self.activation not in ("relu", "softplus"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.temperature > 0:
            raise ValueError("softplus temperature must be positive")

    @property
    def shapes(self):
        d, w, c = self.input_dim, self.width, self.output_dim
        return [(w, d), (w,), (w, w), (w,), (c, w), (c,)]

    @property
    def num_params(self) -> int:
        d, w, c = self.input_dim, self.width, self.output_dim
        return (d * w + w) + (w * w + w) + (w * c + c)

    @property
    def fan_ins(self):
        return (self.input_dim, self.width, self.width)

    def with_activation(self, activation: str, temperature: float | None = None) -> "Architecture":
        return replace(self, activation=activation,
                       temperature=self.temperature if temperature is None else temperature)

    def with_temperature(self, temperature: float) -> "Architecture":
        return replace(self, activation="softplus", temperature=float(temperature))


def unflatten(arch: Architecture, theta: np.ndarray) -> list[np.ndarray]:
    """Split a flat parameter vector into views [W1, b1, W2, b2, W3, b3]."""
    theta = np.asarray(theta)
    if theta.shape != (arch.num_params,):
        raise ValueError(f"expected {arch.num_params} parameters, got shape {theta.shape}")
    out, start = [], 0
    for shape in arch.shapes:
        size = int(np.prod(shape))
        out.append(theta[start:start + size].reshape(shape))
        start += size
    return out


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in layers])


def init_params(arch: Architecture, seed: int, bias_std: float = 0.0,
                truncated: bool = True, dtype=np.float64) -> np.ndarray:
    """LeCun-normal initialisation: truncated at two standard deviations and
    rescaled so each weight has standard deviation exactly 1/sqrt(fan_in).

    Biases are zero unless ``bias_std`` is given (used when sampling networks
    whose tangent kernel should match the analytic kernel with unit bias variance).
    ``truncated=False`` draws plain Gaussians with the same standard deviation.
    """
    rng = np.random.default_rng(seed)
    # std of a unit normal truncated to [-2, 2]
    trunc_std = float(stats.truncnorm.std(-2.0, 2.0))
    layers = []
    for shape, fan_in in zip(arch.shapes[::2], arch.fan_ins):
        if truncated:
            z = stats.truncnorm.rvs(-2.0, 2.0, size=shape, random_state=rng) / trunc_std
        else:
            z = rng.standard_normal(shape)
        layers.append(z / np.sqrt(fan_in))
        bshape = (shape[0],)
        layers.append(bias_std * rng.standard_normal(bshape) if bias_std else np.zeros(bshape))
    return flatten(layers).astype(dtype)


def _act(arch: Architecture, z):
    """Return s(z), s'(z), s''(z)."""
    if arch.activation == "relu":
        return np.maximum(z, 0.0), (z > 0).astype(z.dtype), np.zeros_like(z)
    t = arch.temperature
    sig = expit(t * z)
    return np.logaddexp(0.0, t * z) / t, sig, t * sig * (1.0 - sig)


def _as_batch(arch: Architecture, x):
    x = np.asarray(x)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise ValueError(f"input has shape {x.shape}, expected (..., {arch.input_dim})")
    return X, single


class _Cache:
    """Forward activations for a batch, shared by all derivative routines."""

    def __init__(self, arch, layers, X):
        W1, b1, W2, b2, W3, b3 = layers
        self.X = X
        self.h1 = X @ W1.T + b1
        self.a1, self.s1, self.ss1 = _act(arch, self.h1)
        self.h2 = self.a1 @ W2.T + b2
        self.a2, self.s2, self.ss2 = _act(arch, self.h2)
        self.out = self.a2 @ W3.T + b3


def forward(arch: Architecture, params, x):
    X, single = _as_batch(arch, x)
    out = _Cache(arch, unflatten(arch, params), X).out
    return out[0] if single else out


def _backprop(layers, cache, U):
    """Per-example deltas at both hidden layers for output cotangents U (n, C)."""
    _, _, W2, _, W3, _ = layers
    d2 = cache.s2 * (U @ W3)
    d1 = cache.s1 * (d2 @ W2)
    return d1, d2


def param_vjp(arch: Architecture, params, x, u) -> np.ndarray:
    """u^T (df/dtheta).  For a batch, returns the sum over examples of u_i^T J(x_i)."""
    X, single = _as_batch(arch, x)
    U = np.asarray(u).reshape(X.shape[0], arch.output_dim)
    layers = unflatten(arch, params)
    cache = _Cache(arch, layers, X)
    return _vjp_from_cache(layers, cache, U)


def _vjp_from_cache(layers, cache, U):
    d1, d2 = _backprop(layers, cache, U)
    return flatten([d1.T @ cache.X, d1.sum(0), d2.T @ cache.a1, d2.sum(0),
                    U.T @ cache.a2, U.sum(0)])


def param_jvp(arch: Architecture, params, x, v) -> np.ndarray:
    """(df/dtheta) v computed by a forward-mode pass."""
    X, single = _as_batch(arch, x)
    layers = unflatten(arch, params)
    cache = _Cache(arch, layers, X)
    out = _jvp_from_cache(arch, layers, cache, v)
    return out[0] if single else out


def _jvp_from_cache(arch, layers, cache, v):
    _, _, W2, _, W3, _ = layers
    V1, c1, V2, c2, V3, c3 = unflatten(arch, v)
    dh1 = cache.X @ V1.T + c1
    da1 = cache.s1 * dh1
    dh2 = cache.a1 @ V2.T + da1 @ W2.T + c2
    da2 = cache.s2 * dh2
    return cache.a2 @ V3.T + da2 @ W3.T + c3


def param_gradient(arch: Architecture, params, x) -> np.ndarray:
    """Jacobian rows: (C, P) for one input, (n, C, P) for a batch."""
    X, single = _as_batch(arch, x)
    layers = unflatten(arch, params)
    cache = _Cache(arch, layers, X)
    n, C, w = X.shape[0], arch.output_dim, arch.width
    W3 = layers[4]
    eye = np.eye(C, dtype=X.dtype)
    d2 = cache.s2[:, None, :] * W3[None, :, :]
    d1 = cache.s1[:, None, :] * (d2 @ layers[2])
    blocks = [
        (d1[..., :, None] * X[:, None, None, :]).reshape(n, C, -1),
        d1,
        (d2[..., :, None] * cache.a1[:, None, None, :]).reshape(n, C, -1),
        d2,
        (eye[None, :, :, None] * cache.a2[:, None, None, :]).reshape(n, C, -1),
        np.broadcast_to(eye, (n, C, C)),
    ]
    J = np.concatenate(blocks, axis=2)
    return J[0] if single else J


def vjp_pullback(arch: Architecture, params, X, U, r):
    """Gradients of sum_i r^T vjp(x_i, u_i) with respect to every x_i and u_i.

    Returns (dX, dU) with shapes (n, d) and (n, C).  The gradient with respect
    to u_i is the JVP J(x_i) r; the gradient with respect to x_i needs the
    mixed second derivative and therefore a smooth activation.
    """
    if arch.activation != "softplus":
        raise ActivationError("input gradients of parameter VJPs need the softplus activation")
    X = np.atleast_2d(X)
    U = np.asarray(U).reshape(X.shape[0], arch.output_dim)
    layers = unflatten(arch, params)
    return _pullback_from_cache(arch, layers, _Cache(arch, layers, X), U, r)


def _pullback_from_cache(arch, layers, cache, U, r):
    X = cache.X
    W1, _, W2, _, W3, _ = layers
    R1, rb1, R2, rb2, R3, rb3 = unflatten(arch, r)

    # tangent pass in direction r
    dh1 = X @ R1.T + rb1
    da1 = cache.s1 * dh1
    dh2 = cache.a1 @ R2.T + da1 @ W2.T + rb2
    da2 = cache.s2 * dh2
    dU = cache.a2 @ R3.T + da2 @ W3.T + rb3

    # reverse through the tangent pass, cotangent U on its output
    g_a2 = U @ R3
    g_da2 = U @ W3
    g_dh2 = cache.s2 * g_da2
    g_h2 = cache.ss2 * dh2 * g_da2 + cache.s2 * g_a2
    g_a1 = g_dh2 @ R2 + g_h2 @ W2
    g_da1 = g_dh2 @ W2
    g_dh1 = cache.s1 * g_da1
    g_h1 = cache.ss1 * dh1 * g_da1 + cache.s1 * g_a1
    dX = g_dh1 @ R1 + g_h1 @ W1
    return dX, dU


def input_grad_of_vjp(arch: Architecture, params, x, u, r) -> np.ndarray:
    """d/dx of r^T vjp(x, u)."""
    x = np.asarray(x)
    single = x.ndim == 1
    dX, _ = vjp_pullback(arch, params, np.atleast_2d(x), np.atleast_2d(u), r)
    return dX[0] if single else dX

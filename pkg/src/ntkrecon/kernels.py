"""Tangent kernels, kernel regression and the dual-coefficient solves."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .network import Architecture, _Cache, _backprop, unflatten


class SingularKernelError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class RidgePolicy:
    """Diagonal regulariser added before any solve.

    mode "relative" adds ``lam * trace(K) / n``; "absolute" adds ``lam``.
    """
    mode: str = "relative"
    lam: float = 1e-10

    def __post_init__(self):
        if self.mode not in ("none", "absolute", "relative"):
            raise ValueError(f"unknown ridge mode {self.mode!r}")
        if self.lam < 0:
            raise ValueError("ridge must be non-negative")

    @classmethod
    def none(cls) -> "RidgePolicy":
        return cls("none", 0.0)

    def amount(self, K: np.ndarray) -> float:
        if self.mode == "none":
            return 0.0
        if self.mode == "absolute":
            return self.lam
        return self.lam * float(np.trace(K)) / K.shape[0]

    def apply(self, K: np.ndarray) -> np.ndarray:
        lam = self.amount(K)
        if lam == 0.0:
            return K
        return K + lam * np.eye(K.shape[0], dtype=K.dtype)

    def describe(self) -> str:
        return self.mode if self.mode == "none" else f"{self.mode}({self.lam:g})"


DEFAULT_RIDGE = RidgePolicy()


class KernelSolver:
    """Factorisation of K + ridge, reusable across many right-hand sides.

    Cholesky first; LU for indefinite-but-regular systems; singular systems
    raise :class:`SingularKernelError`.
    """

    def __init__(self, K, ridge: RidgePolicy = DEFAULT_RIDGE):
        K = np.asarray(K, dtype=np.float64)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise ValueError(f"kernel must be square, got {K.shape}")
        self.ridge = ridge
        A = ridge.apply(K)
        self._cho = self._lu = None
        try:
            self._cho = linalg.cho_factor(A, lower=True)
            return
        except linalg.LinAlgError:
            pass
        with warnings.catch_warnings():
            warnings.simplefilter("error", linalg.LinAlgWarning)
            try:
                self._lu = linalg.lu_factor(A)
                rcond = 1.0 / np.linalg.cond(A)
            except (linalg.LinAlgError, linalg.LinAlgWarning) as exc:
                raise SingularKernelError(f"kernel is singular under ridge {ridge.describe()}") from exc
        if not rcond > np.finfo(float).eps:
            raise SingularKernelError(f"kernel is singular under ridge {ridge.describe()} (rcond {rcond:.1e})")

    def solve(self, Y) -> np.ndarray:
        if self._cho is not None:
            return linalg.cho_solve(self._cho, Y)
        return linalg.lu_solve(self._lu, Y)


def solve_psd(K: np.ndarray, Y: np.ndarray, ridge: RidgePolicy = DEFAULT_RIDGE) -> np.ndarray:
    """Solve (K + ridge) Z = Y without forming an inverse."""
    return KernelSolver(K, ridge).solve(Y)


def _layer_terms(arch, params, X, ntk_scaling):
    layers = unflatten(arch, params)
    cache = _Cache(arch, layers, X)
    n, C = X.shape[0], arch.output_dim
    eye = np.eye(C)
    # per-class deltas: (n, C, w)
    d2 = cache.s2[:, None, :] * layers[4][None, :, :]
    d1 = cache.s1[:, None, :] * (d2 @ layers[2])
    scale = [1.0 / f for f in arch.fan_ins] if ntk_scaling else [1.0, 1.0, 1.0]
    return cache, (d1, d2), scale, eye


def empirical_ntk_blocks(arch: Architecture, params, XA, XB=None, parameterization="standard"):
    """Full per-class tangent kernel, shape (nA, C, nB, C)."""
    XA = np.atleast_2d(XA)
    XB = XA if XB is None else np.atleast_2d(XB)
    ntk = _check_param(parameterization)
    ca, (a1, a2), scale, eye = _layer_terms(arch, params, XA, ntk)
    cb, (b1, b2), _, _ = _layer_terms(arch, params, XB, ntk)
    K = np.einsum("icw,jdw->icjd", a1, b1) * (scale[0] * (ca.X @ cb.X.T) + 1.0)[:, None, :, None]
    K += np.einsum("icw,jdw->icjd", a2, b2) * (scale[1] * (ca.a1 @ cb.a1.T) + 1.0)[:, None, :, None]
    K += (scale[2] * (ca.a2 @ cb.a2.T) + 1.0)[:, None, :, None] * eye[None, :, None, :]
    return K


def _check_param(p):
    if p not in ("standard", "ntk"):
        raise ValueError(f"unknown parameterization {p!r}")
    return p == "ntk"


def empirical_ntk(arch: Architecture, params, XA, XB=None, parameterization="standard") -> np.ndarray:
    """Finite-width tangent kernel summed over output classes.

    Built layer by layer from (delta . delta')(a . a' + 1) products, so the
    Jacobian is never materialised.  ``parameterization="ntk"`` divides each
    weight block by its fan-in, which is the kernel of the same function
    written in NTK parameterisation and the one that converges to
    :func:`analytic_ntk` as the width grows (for unit-variance biases).
    """
    XA = np.atleast_2d(XA)
    XB = XA if XB is None else np.atleast_2d(XB)
    ntk = _check_param(parameterization)
    ca, (a1, a2), scale, _ = _layer_terms(arch, params, XA, ntk)
    cb, (b1, b2), _, _ = _layer_terms(arch, params, XB, ntk)
    C = arch.output_dim
    K = np.einsum("icw,jcw->ij", a1, b1) * (scale[0] * (ca.X @ cb.X.T) + 1.0)
    K += np.einsum("icw,jcw->ij", a2, b2) * (scale[1] * (ca.a1 @ cb.a1.T) + 1.0)
    K += C * (scale[2] * (ca.a2 @ cb.a2.T) + 1.0)
    return K


# ---------------------------------------------------------------------------
# infinite-width ReLU kernel
#
# sw, sb are the weight and bias variances of every layer.  The defaults
# (1, 1) are the limit of :func:`init_params` with NTK-scaled biases.

def _k1(S, na, nb, rho):
    theta = np.arccos(rho)
    return np.sqrt(na * nb) * (np.sin(theta) + (np.pi - theta) * rho) / (2 * np.pi)


def _k0(rho):
    return (np.pi - np.arccos(rho)) / (2 * np.pi)


def _check_variances(sw, sb):
    if not (sw > 0 and sb >= 0):
        raise ValueError("need weight_variance > 0 and bias_variance >= 0")
    return float(sw), float(sb)


def _forward_layers(XA, XB, same, sw=1.0, sb=1.0):
    d = XA.shape[1]
    S = sw * (XA @ XB.T) / d + sb
    na = sw * np.einsum("ij,ij->i", XA, XA) / d + sb
    nb = na if same else sw * np.einsum("ij,ij->i", XB, XB) / d + sb
    T = S
    states = []
    for _ in range(2):
        denom = np.sqrt(np.outer(na, nb))
        rho = np.clip(S / denom, -1.0, 1.0)
        if same:
            np.fill_diagonal(rho, 1.0)
        k1 = _k1(S, na[:, None], nb[None, :], rho)
        k0 = _k0(rho)
        states.append((S, na, nb, rho, k1, k0, T))
        S = sw * k1 + sb
        T = sw * k0 * T + S
        na, nb = sw * na / 2 + sb, (sw * na / 2 + sb) if same else sw * nb / 2 + sb
    return T, states


def _check_rows(X):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if np.any(np.einsum("ij,ij->i", X, X) == 0):
        raise ValueError("analytic NTK needs nonzero input rows")
    return X


def analytic_ntk(XA, XB=None, weight_variance=1.0, bias_variance=1.0) -> np.ndarray:
    """Infinite-width NTK of the two-hidden-layer ReLU network.

    First-layer covariance sw x.x'/d + sb, then two arc-cosine layers
    ``Sigma <- sw kappa1 + sb``; the tangent kernel accumulates
    ``Theta <- sw kappa0 Theta + Sigma``.
    """
    sw, sb = _check_variances(weight_variance, bias_variance)
    XA = _check_rows(XA)
    same = XB is None
    XB = XA if same else _check_rows(XB)
    T, _ = _forward_layers(XA, XB, same, sw, sb)
    return T


def analytic_ntk_vjp(XA, XB, G, same=False, wrt="both", weight_variance=1.0, bias_variance=1.0):
    """Pull back a cotangent G on ``analytic_ntk(XA, XB)`` to the inputs.

    With ``same=True`` XB is XA, G is the cotangent on the symmetric Gram and
    the single input gradient is returned as ``(dX, dX)``.  Diagonal entries
    have correlation identically one; their correlation path is dropped,
    which is exact.  ``wrt="b"`` skips the XA gradient (returned as None).
    """
    sw, sb = _check_variances(weight_variance, bias_variance)
    XA = _check_rows(XA)
    XB = XA if same else _check_rows(XB)
    d = XA.shape[1]
    _, states = _forward_layers(XA, XB, same, sw, sb)
    gT = np.asarray(G, dtype=np.float64)
    gS = np.zeros_like(gT)      # cotangent on S of the layer being unwound
    gna = np.zeros(XA.shape[0])
    gnb = np.zeros(XB.shape[0])
    for S, na, nb, rho, k1, k0, Tprev in reversed(states):
        # T_next = sw k0 Tprev + S_next; S_next = sw k1 + sb
        g_k1 = sw * (gT + gS)
        g_k0 = sw * gT * Tprev
        gT = sw * gT * k0
        denom = np.sqrt(np.outer(na, nb))
        sin = np.sqrt(np.maximum(1.0 - rho ** 2, 1e-30))
        dk0_drho = 1.0 / (2 * np.pi * sin)
        if same:
            np.fill_diagonal(dk0_drho, 0.0)
        g_rho = g_k0 * dk0_drho
        # k1 partials: d/dS = k0; d/dna = (k1 - k0 S) / (2 na)
        gS_new = g_k1 * k0 + g_rho / denom
        g_na_pair = g_k1 * (k1 - k0 * S) / (2 * na[:, None]) - g_rho * rho / (2 * na[:, None])
        g_nb_pair = g_k1 * (k1 - k0 * S) / (2 * nb[None, :]) - g_rho * rho / (2 * nb[None, :])
        new_gna = g_na_pair.sum(1)
        new_gnb = g_nb_pair.sum(0)
        # the norms of this layer feed the next layer's norms as sw n/2 + sb
        gna = new_gna + sw * gna / 2
        gnb = new_gnb + sw * gnb / 2
        gS = gS_new
    gS = gS + gT
    dB = sw * (gS.T @ XA + 2 * XB * gnb[:, None]) / d
    if wrt == "b" and not same:
        return None, dB
    dA = sw * (gS @ XB + 2 * XA * gna[:, None]) / d
    if same:
        dX = dA + dB
        return dX, dX
    return dA, dB


# ---------------------------------------------------------------------------

def kernel_regression_predict(K_TS, K_SS, y_S, ridge: RidgePolicy = DEFAULT_RIDGE) -> np.ndarray:
    return np.asarray(K_TS) @ solve_psd(K_SS, y_S, ridge)


def solve_alpha(K_TT, y_T, ridge: RidgePolicy = DEFAULT_RIDGE) -> np.ndarray:
    y = np.asarray(y_T, dtype=np.float64)
    return solve_psd(K_TT, y, ridge)


def kernel_distance(K0, Kf) -> float:
    """One minus the Frobenius cosine similarity of two Gram matrices."""
    K0 = np.asarray(K0, dtype=np.float64)
    Kf = np.asarray(Kf, dtype=np.float64)
    if K0.shape != Kf.shape:
        raise ValueError(f"shape mismatch {K0.shape} vs {Kf.shape}")
    n0, nf = np.linalg.norm(K0), np.linalg.norm(Kf)
    if n0 == 0 or nf == 0:
        raise ValueError("kernel distance undefined for a zero matrix")
    return float(1.0 - np.sum(K0 * Kf) / (n0 * nf))


def alpha_zero_residual(K_TT, y_T, i: int, ridge: RidgePolicy = RidgePolicy.none()):
    """Label of point i minus its leave-one-out kernel regression prediction.

    Zero exactly when the dual coefficient of point i vanishes.
    """
    K = np.asarray(K_TT, dtype=np.float64)
    y = np.asarray(y_T, dtype=np.float64)
    n = K.shape[0]
    if n < 2:
        raise ValueError("need at least two points")
    rest = np.delete(np.arange(n), i)
    pred = K[i, rest] @ solve_psd(K[np.ix_(rest, rest)], y[rest], ridge)
    return y[i] - pred


def is_psd(K, tol=1e-8) -> bool:
    K = np.asarray(K)
    if not np.allclose(K, K.T, atol=1e-10 * max(1.0, np.abs(K).max())):
        return False
    return bool(np.linalg.eigvalsh(K).min() >= -tol * max(1.0, np.trace(K)))

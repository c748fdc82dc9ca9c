"""Reconstruction quality: greedy pairing, curves and per-point tables."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import LabeledDataset


@dataclass
class ReconstructionCurve:
    train_index: np.ndarray
    recon_index: np.ndarray
    sq_l2: np.ndarray

    def __len__(self):
        return len(self.sq_l2)

    def rows(self):
        return list(zip(self.train_index.tolist(), self.recon_index.tolist(), self.sq_l2.tolist()))

    def distance_of(self) -> dict:
        """train index -> paired distance"""
        return dict(zip(self.train_index.tolist(), self.sq_l2.tolist()))


def pairwise_sq_dists(A, B) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    D = np.einsum("ij,ij->i", A, A)[:, None] + np.einsum("ij,ij->i", B, B)[None, :] - 2 * A @ B.T
    return np.maximum(D, 0.0)


def greedy_pair_distances(D) -> ReconstructionCurve:
    """Repeatedly take the globally smallest remaining (train, recon) entry.

    Ties go to the lexicographically smallest (train, recon) pair: a stable
    sort of the row-major flattening visits candidates in exactly that order.
    """
    D = np.asarray(D, dtype=np.float64)
    N, M = D.shape
    if M < N:
        raise ValueError(f"need at least as many reconstructions as training images ({M} < {N})")
    order = np.argsort(D, axis=None, kind="stable")
    used_t = np.zeros(N, bool)
    used_r = np.zeros(M, bool)
    ti, ri = [], []
    for flat in order:
        i, j = divmod(int(flat), M)
        if used_t[i] or used_r[j]:
            continue
        used_t[i] = used_r[j] = True
        ti.append(i)
        ri.append(j)
        if len(ti) == N:
            break
    ti, ri = np.array(ti), np.array(ri)
    return ReconstructionCurve(ti, ri, D[ti, ri])


def greedy_pair(X_train, X_recon) -> ReconstructionCurve:
    return greedy_pair_distances(pairwise_sq_dists(X_train, X_recon))


def mean_recon_error(curve: ReconstructionCurve) -> float:
    if len(curve) == 0:
        raise ValueError("empty curve")
    return float(np.mean(curve.sq_l2))


def average_curves(curves) -> np.ndarray:
    """Pointwise-by-rank mean of several curves of equal length."""
    return np.mean([c.sq_l2 for c in curves], axis=0)


def alpha_error_table(curve: ReconstructionCurve, alpha) -> list[tuple[int, float, float]]:
    """Rows (train_index, |alpha|, distance) sorted by train index.

    Multiclass duals use the l2 norm of the row.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim == 1:
        alpha = alpha[:, None]
    if len(alpha) != len(curve) or curve.train_index.max(initial=-1) >= len(alpha):
        raise ValueError("alpha rows do not line up with the training set of the curve")
    mags = np.linalg.norm(alpha, axis=1)
    dist = curve.distance_of()
    return [(i, float(mags[i]), float(dist[i])) for i in sorted(dist)]


def spearman(a, b) -> float:
    from scipy.stats import spearmanr
    return float(spearmanr(a, b).statistic)


def prune_most_reconstructed(curve: ReconstructionCurve, data: LabeledDataset, k: int = 20,
                             balanced: bool = False):
    """Drop the k training points that were reconstructed best.

    Balanced mode removes k / #classes points from every class, ranked by
    their paired distance within the class.  Returns (reduced set, removed indices).
    """
    n = len(data)
    if k > n:
        raise ValueError(f"cannot remove {k} of {n} points")
    dist = np.full(n, np.inf)
    dist[curve.train_index] = curve.sq_l2
    if balanced:
        classes = np.unique(data.class_ids)
        if k % len(classes):
            raise ValueError(f"k={k} is not divisible by the {len(classes)} classes")
        per = k // len(classes)
        removed = []
        for c in classes:
            members = np.flatnonzero(data.class_ids == c)
            if per > len(members):
                raise ValueError(f"class {c} has only {len(members)} points")
            removed.extend(members[np.argsort(dist[members], kind="stable")[:per]])
        removed = np.sort(np.array(removed, dtype=int))
    else:
        removed = np.sort(np.argsort(dist, kind="stable")[:k])
    keep = np.setdiff1d(np.arange(n), removed)
    return data.subset(keep), removed


def prune_random(data: LabeledDataset, k: int, rng, balanced: bool = False):
    """Control arm: uniform removal, optionally class balanced."""
    n = len(data)
    if balanced:
        classes = np.unique(data.class_ids)
        if k % len(classes):
            raise ValueError(f"k={k} is not divisible by the {len(classes)} classes")
        removed = np.concatenate([rng.choice(np.flatnonzero(data.class_ids == c), k // len(classes),
                                             replace=False) for c in classes])
    else:
        removed = rng.choice(n, k, replace=False)
    removed = np.sort(removed)
    return data.subset(np.setdiff1d(np.arange(n), removed)), removed

"""Normalized-cut criteria: the hard partition value and its soft relaxation.

For a soft segmentation with per-class probability columns ``p_k`` and the
affinity ``W`` with degree vector ``d`` the loss is::

    J = K - sum_k (p_k' W p_k) / (p_k' d)

which is the matrix form of the pairwise double sums.  The gradient returned
by :func:`soft_ncut_grad` is taken with respect to the probabilities
themselves; callers compose it with the softmax Jacobian.
"""

from __future__ import annotations

import numpy as np

from .affinity import SparseAffinity
from .tensor import as_labels, as_soft


class DegenerateClassError(ArithmeticError):
    """A class has zero association with the graph, so its ratio is undefined."""


def _flatten(p, W: SparseAffinity) -> np.ndarray:
    p = as_soft(p)
    if p.shape[0] * p.shape[1] != W.n:
        raise ValueError(f"soft segmentation has {p.shape[0] * p.shape[1]} pixels, affinity {W.n}")
    return p.reshape(-1, p.shape[2])


def hard_ncut(labels, W: SparseAffinity, k: int) -> float:
    """Sum over classes of cut(A_k, V - A_k) / assoc(A_k, V).

    Empty classes contribute nothing.
    """
    labels = as_labels(labels).ravel()
    if labels.size != W.n:
        raise ValueError(f"label map has {labels.size} pixels, affinity {W.n}")
    if labels.size and labels.max() >= k:
        raise ValueError(f"label {labels.max()} is outside 0..{k - 1}")
    total = 0.0
    for c in range(k):
        members = labels == c
        if not members.any():
            continue
        rows = W.matrix[members]
        cut = rows[:, ~members].sum()
        total += cut / W.degree[members].sum()
    return float(total)


def _ratios(P: np.ndarray, W: SparseAffinity):
    """Association sums of the columns of ``P``, each rescaled to a maximum of 1.

    The ratio p'Wp / p'd scales linearly with p, so the ratio of a column is
    its scale times the ratio of the rescaled column, and the gradient is
    the gradient at the rescaled column.  A constant column becomes exactly 1,
    which makes the uniform field give exactly K - 1.
    """
    scale = P.max(axis=0)
    if np.any(scale <= 0):
        bad = int(np.flatnonzero(scale <= 0)[0])
        raise DegenerateClassError(f"class {bad} has no probability mass")
    Q = P / scale
    WQ = W.matrix @ Q
    assoc_a = np.einsum("nk,nk->k", Q, WQ)
    # same reduction as assoc_a so that Wq = d gives bitwise equal sums
    assoc_v = np.einsum("nk,nk->k", Q, np.broadcast_to(W.degree[:, None], Q.shape))
    if np.any(assoc_v <= 0):
        bad = int(np.flatnonzero(assoc_v <= 0)[0])
        raise DegenerateClassError(f"class {bad} has zero association with the graph")
    return WQ, assoc_a, assoc_v, scale


def _grad(W, WQ, assoc_a, assoc_v):
    return -(2.0 * WQ * assoc_v - np.outer(W.degree, assoc_a)) / assoc_v**2


def soft_ncut(p, W: SparseAffinity) -> float:
    P = _flatten(p, W)
    _, assoc_a, assoc_v, scale = _ratios(P, W)
    return float(P.shape[1] - np.sum(scale * (assoc_a / assoc_v)))


def soft_ncut_grad(p, W: SparseAffinity) -> np.ndarray:
    """Gradient of :func:`soft_ncut` with respect to ``p``, shaped like ``p``."""
    p = as_soft(p)
    P = _flatten(p, W)
    WQ, assoc_a, assoc_v, _ = _ratios(P, W)
    return _grad(W, WQ, assoc_a, assoc_v).reshape(p.shape)


def soft_ncut_with_grad(p, W: SparseAffinity) -> tuple[float, np.ndarray]:
    """Loss and gradient sharing one sparse product."""
    p = as_soft(p)
    P = _flatten(p, W)
    WQ, assoc_a, assoc_v, scale = _ratios(P, W)
    loss = float(P.shape[1] - np.sum(scale * (assoc_a / assoc_v)))
    return loss, _grad(W, WQ, assoc_a, assoc_v).reshape(p.shape)

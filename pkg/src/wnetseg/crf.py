"""Fully connected CRF smoothing by exact mean-field inference.

The energy of a labelling ``x`` is::

    E(x) = sum_u -log p(u, x_u) + sum_{u<v} mu(x_u, x_v) k(u, v)

with Potts compatibility ``mu(l, m) = [l != m]`` and the two-kernel pairwise
weight::

    k(u, v) = w_app * exp(-|P_u - P_v|^2 / (2 theta_alpha^2) - |I_u - I_v|^2 / (2 theta_beta^2))
            + w_smooth * exp(-|P_u - P_v|^2 / (2 theta_gamma^2))

where ``P`` is the pixel position and ``I`` the colour on the 0-255 scale.
Messages are computed exactly, block by block, so the cost is quadratic in
the number of pixels; inputs above ``max_pixels`` are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import ShapeError, as_image, as_labels, as_soft

_BLOCK = 1024


class CrfSizeError(ValueError):
    pass


@dataclass(frozen=True)
class CrfParams:
    iterations: int = 10
    w_app: float = 5.0
    w_smooth: float = 3.0
    theta_alpha: float = 20.0
    theta_beta: float = 13.0
    theta_gamma: float = 3.0
    max_pixels: int = 128 * 128
    # floor applied to probabilities before taking logs
    clamp: float = 1e-12

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        for name in ("theta_alpha", "theta_beta", "theta_gamma", "clamp"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.w_app < 0 or self.w_smooth < 0:
            raise ValueError("kernel weights must be non-negative")

    @property
    def has_pairwise(self) -> bool:
        return self.w_app > 0 or self.w_smooth > 0


def _features(img, shape):
    img = as_image(img)
    if img.shape[:2] != shape:
        raise ShapeError(f"image is {img.shape[:2]}, segmentation is {shape}")
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    pos = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    col = img.reshape(h * w, -1) * 255.0
    return pos, col


def _sqdist(a, b):
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def kernel_block(pos, col, rows: slice, params: CrfParams) -> np.ndarray:
    """Pairwise weights ``k(u, v)`` for ``u`` in ``rows`` and every ``v``; ``k(u, u) = 0``."""
    dp = _sqdist(pos[rows], pos)
    out = np.zeros_like(dp)
    if params.w_app > 0:
        dc = _sqdist(col[rows], col)
        out += params.w_app * np.exp(
            -dp / (2 * params.theta_alpha**2) - dc / (2 * params.theta_beta**2))
    if params.w_smooth > 0:
        out += params.w_smooth * np.exp(-dp / (2 * params.theta_gamma**2))
    idx = np.arange(rows.start, rows.stop)
    out[idx - rows.start, idx] = 0.0
    return out


def _messages(pos, col, q, params):
    n = q.shape[0]
    out = np.empty_like(q)
    for start in range(0, n, _BLOCK):
        rows = slice(start, min(start + _BLOCK, n))
        out[rows] = kernel_block(pos, col, rows, params) @ q
    return out


def mean_field(p, img, params: CrfParams | None = None,
               on_iteration: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """Approximate the CRF marginals starting from the unary field ``p``.

    ``on_iteration(i, q)`` is called after every update with the current
    ``(H, W, K)`` field.
    """
    params = params or CrfParams()
    p = as_soft(p)
    h, w, k = p.shape
    if h * w > params.max_pixels:
        raise CrfSizeError(
            f"{h}x{w} image has {h * w} pixels; exact inference is limited to "
            f"{params.max_pixels}, downscale the input first"
        )
    if not params.has_pairwise:
        return p.copy()
    pos, col = _features(img, (h, w))
    unary = -np.log(np.maximum(p.reshape(-1, k), params.clamp))
    q = _normalize(-unary)
    for it in range(params.iterations):
        m = _messages(pos, col, q, params)
        # Potts: penalty for label l is the message mass on every other label
        pairwise = m.sum(axis=1, keepdims=True) - m
        q = _normalize(-unary - pairwise)
        if on_iteration is not None:
            on_iteration(it, q.reshape(h, w, k))
    return q.reshape(h, w, k)


def _normalize(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def crf_argmax(q) -> np.ndarray:
    """Per-pixel most probable class; ties go to the lowest index."""
    return np.argmax(as_soft(q), axis=-1).astype(np.int64)


def crf_energy(labels, img, p, params: CrfParams | None = None) -> float:
    """Energy of ``labels``; ``inf`` if a pixel is given a class of probability zero."""
    params = params or CrfParams()
    p = as_soft(p)
    labels = as_labels(labels)
    h, w, k = p.shape
    if labels.shape != (h, w):
        raise ShapeError(f"labels are {labels.shape}, segmentation is {(h, w)}")
    chosen = np.take_along_axis(p.reshape(-1, k), labels.reshape(-1, 1), axis=1).ravel()
    if np.any(chosen <= 0):
        return float("inf")
    energy = float(-np.log(chosen).sum())
    if not params.has_pairwise:
        return energy
    pos, col = _features(img, (h, w))
    flat = labels.ravel()
    n = flat.size
    pair = 0.0
    for start in range(0, n, _BLOCK):
        rows = slice(start, min(start + _BLOCK, n))
        kb = kernel_block(pos, col, rows, params)
        differ = flat[rows, None] != flat[None, :]
        pair += float((kb * differ).sum())
    # every unordered pair was visited twice
    return energy + 0.5 * pair

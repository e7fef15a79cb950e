"""Raster conventions shared by every module.

Images are ``(H, W, C)`` float64 arrays in row-major ``(y, x, c)`` order with
values in [0, 1].  Label maps are ``(H, W)`` int64 arrays of non-negative
labels.  Soft segmentations are ``(H, W, K)`` arrays whose last axis lies on
the probability simplex.

Random streams come from :func:`make_rng`, a PCG64 generator.  PCG64 output
is fully specified by its seed, so equal seeds give byte-identical streams on
every platform.
"""

from __future__ import annotations

import numpy as np

SIMPLEX_ATOL = 1e-6


class ShapeError(ValueError):
    """Raised when an array does not have the raster shape an operation needs."""


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_image(img) -> np.ndarray:
    """Validate and return an ``(H, W, C)`` float64 image.

    A 2-D array is promoted to a single channel image.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeError(f"image must be (H, W, C), got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0 or arr.shape[2] == 0:
        raise ShapeError(f"image must be non-empty, got shape {arr.shape}")
    return arr


def as_labels(labels) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ShapeError(f"label map must be (H, W), got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.round(arr)):
            raise ValueError("label map must hold integers")
    arr = arr.astype(np.int64)
    if arr.size and arr.min() < 0:
        raise ValueError("label map must be non-negative")
    return arr


def as_soft(p) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"soft segmentation must be (H, W, K), got shape {arr.shape}")
    return arr


def check_simplex(p, atol: float = SIMPLEX_ATOL) -> None:
    """Raise ValueError unless every pixel of ``p`` is a probability vector."""
    p = as_soft(p)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must be finite and non-negative")
    err = np.abs(p.sum(axis=-1) - 1.0).max()
    if err > atol:
        raise ValueError(f"probabilities do not sum to 1 (max deviation {err:.3g})")


def compact(labels) -> np.ndarray:
    """Relabel to 0..L-1, preserving the order of the original label values."""
    labels = as_labels(labels)
    _, inv = np.unique(labels, return_inverse=True)
    return inv.reshape(labels.shape).astype(np.int64)


def one_hot(labels, k: int, eps: float = 0.0) -> np.ndarray:
    """Indicator embedding of ``labels`` with optional mass smoothing.

    With ``eps > 0`` every entry receives at least ``eps`` and the winning
    class keeps ``1 - (k-1)*eps``, so the result lies strictly inside the
    simplex.
    """
    labels = as_labels(labels)
    if labels.size and labels.max() >= k:
        raise ValueError(f"label {labels.max()} out of range for k={k}")
    p = np.full(labels.shape + (k,), eps, dtype=np.float64)
    np.put_along_axis(p, labels[..., None], 1.0 - (k - 1) * eps, axis=-1)
    return p


def resize_bilinear(img, height: int, width: int) -> np.ndarray:
    """Bilinear resampling with pixel-centre alignment (edges clamped)."""
    img = as_image(img)
    h0, w0, _ = img.shape
    if (h0, w0) == (height, width):
        return img.copy()
    ys = np.clip((np.arange(height) + 0.5) * h0 / height - 0.5, 0, h0 - 1)
    xs = np.clip((np.arange(width) + 0.5) * w0 / width - 0.5, 0, w0 - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h0 - 1)
    x1 = np.minimum(x0 + 1, w0 - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_nearest(arr, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resampling of a 2-D or 3-D raster."""
    arr = np.asarray(arr)
    h0, w0 = arr.shape[:2]
    ys = np.minimum(((np.arange(height) + 0.5) * h0 / height).astype(int), h0 - 1)
    xs = np.minimum(((np.arange(width) + 0.5) * w0 / width).astype(int), w0 - 1)
    return arr[ys][:, xs].copy()


def label_boundaries(labels) -> np.ndarray:
    """Boolean mask of pixels with a 4-neighbour carrying a different label."""
    labels = as_labels(labels)
    mask = np.zeros(labels.shape, dtype=bool)
    dv = labels[1:, :] != labels[:-1, :]
    dh = labels[:, 1:] != labels[:, :-1]
    mask[1:, :] |= dv
    mask[:-1, :] |= dv
    mask[:, 1:] |= dh
    mask[:, :-1] |= dh
    return mask

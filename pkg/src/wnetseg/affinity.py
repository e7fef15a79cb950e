"""Sparse pixel affinity matrix used by the soft normalized-cut loss.

Two pixels ``i`` and ``j`` closer than ``radius`` are linked with weight::

    w_ij = exp(-|F(i) - F(j)|^2 / sigma_i^2) * exp(-|X(i) - X(j)|^2 / sigma_x^2)

where ``F`` is the pixel value on the 0-255 scale (the RGB vector for colour
images) and ``X`` the ``(row, col)`` position.  Pairs at distance ``>= radius``
are not stored.  Every pixel carries a self-loop of weight 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from .tensor import as_image


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class AffinityParams:
    sigma_i: float = 10.0
    sigma_x: float = 4.0
    radius: float = 5.0

    def __post_init__(self):
        for name in ("sigma_i", "sigma_x", "radius"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ParameterError(f"{name} must be strictly positive, got {value}")


@dataclass(frozen=True)
class SparseAffinity:
    """Symmetric CSR weight matrix over the pixels of an ``(height, width)`` grid."""

    matrix: sparse.csr_matrix
    degree: np.ndarray
    height: int
    width: int

    @property
    def n(self) -> int:
        return self.height * self.width

    def neighbors(self, u: int) -> tuple[np.ndarray, np.ndarray]:
        """Column indices and weights stored in row ``u``."""
        lo, hi = self.matrix.indptr[u], self.matrix.indptr[u + 1]
        return self.matrix.indices[lo:hi], self.matrix.data[lo:hi]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def neighborhood_offsets(radius: float) -> list[tuple[int, int]]:
    """All integer offsets ``(dy, dx)`` with Euclidean length strictly below ``radius``."""
    r = int(np.ceil(radius))
    return [
        (dy, dx)
        for dy in range(-r, r + 1)
        for dx in range(-r, r + 1)
        if dy * dy + dx * dx < radius * radius
    ]


def build_affinity(img, params: AffinityParams | None = None) -> SparseAffinity:
    params = params or AffinityParams()
    img = as_image(img)
    h, w, _ = img.shape
    feats = img * 255.0
    index = np.arange(h * w).reshape(h, w)
    rows, cols, vals = [], [], []
    for dy, dx in neighborhood_offsets(params.radius):
        if abs(dy) >= h or abs(dx) >= w:
            continue
        # pairs (y, x) -> (y + dy, x + dx) that stay inside the image
        ys = slice(max(0, -dy), h - max(0, dy))
        xs = slice(max(0, -dx), w - max(0, dx))
        yt = slice(max(0, dy), h + min(0, dy))
        xt = slice(max(0, dx), w + min(0, dx))
        src = index[ys, xs]
        diff = feats[ys, xs] - feats[yt, xt]
        fdist = np.sum(diff * diff, axis=-1)
        wt = np.exp(-fdist / params.sigma_i**2) * np.exp(-(dy * dy + dx * dx) / params.sigma_x**2)
        rows.append(src.ravel())
        cols.append(index[yt, xt].ravel())
        vals.append(wt.ravel())
    n = h * w
    mat = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    mat.sort_indices()
    degree = mat @ np.ones(n)
    return SparseAffinity(mat, degree, h, w)


def degree_vector(W: SparseAffinity) -> np.ndarray:
    """Per-pixel association with the whole graph, self-weight included."""
    return W.degree.copy()


def dump_triples(W: SparseAffinity, path) -> None:
    """Write the stored weights as sorted ``u v w`` lines."""
    coo = W.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    lines = [f"{coo.row[i]} {coo.col[i]} {coo.data[i]:.17g}" for i in order]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))

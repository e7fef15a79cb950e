"""Spectral boundary cue from the eigenvectors of an intervening-contour graph.

The local strength map is reduced by block maximum to at most
``spectral_size`` pixels per side.  Pixels closer than ``spectral_radius``
are linked with weight ``exp(-m / rho)`` where ``m`` is the largest strength
met on the straight segment between them.  The smallest non-trivial
eigenvectors of the normalized Laplacian ``I - D^-1/2 W D^-1/2`` are found by
block inverse iteration; their oriented derivatives, weighted by
``1/sqrt(lambda)``, are summed, brought back to full size and normalized by
their maximum.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from ..affinity import neighborhood_offsets
from ..tensor import resize_bilinear
from .cues import CueParams


class SpectralConvergenceWarning(RuntimeWarning):
    pass


@dataclass
class Eigenpairs:
    values: np.ndarray
    # generalized eigenvectors D^-1/2 u, one column per eigenvalue
    vectors: np.ndarray
    # residuals |L u - lambda u| of the normalized-Laplacian eigenvectors
    residuals: np.ndarray
    converged: bool
    iterations: int


def block_max_downscale(arr, max_side: int) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape
    f = int(np.ceil(max(h, w) / max_side))
    if f <= 1:
        return arr.copy()
    hh, ww = -(-h // f) * f, -(-w // f) * f
    pad = np.zeros((hh, ww))
    pad[:h, :w] = arr
    return pad.reshape(hh // f, f, ww // f, f).max(axis=(1, 3))


def _segment_max(strength, dy, dx):
    """Max of ``strength`` along the segment from each pixel to its ``(dy, dx)`` neighbour."""
    h, w = strength.shape
    steps = max(abs(dy), abs(dx))
    ys = slice(max(0, -dy), h - max(0, dy))
    xs = slice(max(0, -dx), w - max(0, dx))
    yy, xx = np.mgrid[ys, xs]
    out = np.zeros(yy.shape)
    for t in np.linspace(0.0, 1.0, steps + 1):
        oy = int(np.floor(t * dy + 0.5))
        ox = int(np.floor(t * dx + 0.5))
        out = np.maximum(out, strength[yy + oy, xx + ox])
    return yy, xx, out


def intervening_contour_affinity(strength, radius: float, rho: float) -> sparse.csr_matrix:
    """Symmetric affinity; each unordered pair is evaluated once from its lower index."""
    strength = np.asarray(strength, dtype=np.float64)
    h, w = strength.shape
    index = np.arange(h * w).reshape(h, w)
    rows, cols, vals = [index.ravel()], [index.ravel()], [np.ones(h * w)]
    for dy, dx in neighborhood_offsets(radius):
        if (dy, dx) <= (0, 0) or abs(dy) >= h or abs(dx) >= w:
            continue
        yy, xx, m = _segment_max(strength, dy, dx)
        a = index[yy, xx].ravel()
        b = index[yy + dy, xx + dx].ravel()
        wt = np.exp(-m.ravel() / rho)
        rows += [a, b]
        cols += [b, a]
        vals += [wt, wt]
    n = h * w
    mat = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    mat.sort_indices()
    return mat


def normalized_laplacian(W: sparse.csr_matrix):
    d = np.asarray(W.sum(axis=1)).ravel()
    dm = sparse.diags(1.0 / np.sqrt(d))
    L = sparse.identity(W.shape[0], format="csr") - dm @ W @ dm
    return L.tocsc(), d


def smallest_eigenpairs(L, d, count: int, tol: float, max_iter: int, seed: int = 0,
                        shift: float = 1e-3) -> Eigenpairs:
    """Smallest non-trivial eigenpairs of the normalized Laplacian ``L``.

    Block inverse iteration on ``L + shift*I`` with the trivial vector
    ``D^1/2 1`` projected out, a Rayleigh-Ritz rotation each sweep, and a
    residual test ``|L u - lambda u| <= tol`` on every column.
    """
    n = L.shape[0]
    count = min(count, n - 1)
    trivial = np.sqrt(d)
    trivial /= np.linalg.norm(trivial)
    lu = splu((L + shift * sparse.identity(n, format="csc")).tocsc())
    rng = np.random.Generator(np.random.PCG64(seed))
    X = rng.standard_normal((n, count + 2))
    vals = np.zeros(count)
    res = np.full(count, np.inf)
    it = 0
    for it in range(1, max_iter + 1):
        X = lu.solve(X)
        X -= np.outer(trivial, trivial @ X)
        X, _ = np.linalg.qr(X)
        T = X.T @ (L @ X)
        lam, R = np.linalg.eigh((T + T.T) / 2)
        X = X @ R
        LX = L @ X[:, :count]
        vals = lam[:count]
        res = np.linalg.norm(LX - X[:, :count] * vals, axis=0)
        if np.all(res <= tol):
            break
    U = X[:, :count]
    return Eigenpairs(vals, U / np.sqrt(d)[:, None], res, bool(np.all(res <= tol)), it)


def oriented_derivatives(field2d, angles) -> np.ndarray:
    """Absolute derivative across a line at each angle, shape ``(H, W, n_angles)``."""
    gy, gx = np.gradient(field2d)
    return np.stack([np.abs(-np.sin(t) * gx + np.cos(t) * gy) for t in angles], axis=-1)


def spectral_cue(mpb, params: CueParams | None = None, angles=None) -> np.ndarray:
    """Oriented spectral strength in [0, 1], shape ``(H, W, n_angles)``.

    An all-zero strength map gives an all-zero cue; failure of the
    eigensolver to converge gives a warning and an all-zero cue.
    """
    params = params or CueParams()
    mpb = np.asarray(mpb, dtype=np.float64)
    angles = params.angles() if angles is None else np.asarray(angles, dtype=np.float64)
    h, w = mpb.shape
    out = np.zeros((h, w, len(angles)))
    if not np.any(mpb > 0):
        return out
    small = block_max_downscale(mpb, params.spectral_size)
    W = intervening_contour_affinity(small, params.spectral_radius, params.spectral_rho)
    L, d = normalized_laplacian(W)
    eig = smallest_eigenpairs(L, d, params.eigenvectors, params.eig_tol,
                              params.eig_max_iter, params.seed)
    if not eig.converged:
        warnings.warn(
            f"spectral eigenvectors did not converge in {eig.iterations} iterations "
            f"(max residual {eig.residuals.max():.3g}); spectral cue set to zero",
            SpectralConvergenceWarning, stacklevel=2)
        return out
    sh, sw = small.shape
    for lam, vec in zip(eig.values, eig.vectors.T):
        if lam <= 0:
            continue
        full = resize_bilinear(vec.reshape(sh, sw), h, w)[..., 0]
        out += oriented_derivatives(full, angles) / np.sqrt(lam)
    peak = out.max()
    return out / peak if peak > 0 else out

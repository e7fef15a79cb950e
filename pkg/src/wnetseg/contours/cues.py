"""Oriented multi-scale boundary strength on the borders of a region map.

At a pixel, a disc of radius ``r`` is cut by a line through its centre at
angle ``theta``; the cue for one channel is the chi-squared distance::

    chi2(g, h) = 1/2 * sum_b (g_b - h_b)^2 / (g_b + h_b)

between the normalized histograms of the two half-discs.  Pixels lying
exactly on the dividing line, and disc pixels outside the image, are left
out.  The per-pixel strength is the maximum over orientations of the
weighted sum over channels and scales, optionally combined with the
spectral cue, then spread by a logistic rescaled so that 0 maps to 0 and
1 maps to 1.  Only pixels on region borders receive a strength.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.cluster.vq import kmeans2

from ..affinity import ParameterError
from ..tensor import as_image, as_labels, label_boundaries, make_rng


@dataclass(frozen=True)
class CueParams:
    scales: tuple[float, ...] = (2.0, 4.0, 8.0)
    orientations: int = 8
    bins: int = 25
    # per-(channel, scale) weights, row-major over channels; None means uniform
    beta: tuple[float, ...] | None = None
    gamma: float = 0.5
    use_texture: bool = False
    use_spb: bool = False
    textons: int = 16
    logistic_a: float = 8.0
    logistic_b: float = 0.25
    spectral_size: int = 64
    spectral_radius: float = 5.0
    spectral_rho: float = 0.1
    eigenvectors: int = 4
    eig_tol: float = 1e-6
    eig_max_iter: int = 2000
    seed: int = 0

    def __post_init__(self):
        if not self.scales or any(not s > 0 for s in self.scales):
            raise ParameterError("disc radii must be positive")
        if self.orientations < 2:
            raise ParameterError("need at least two orientations")
        if self.bins < 1 or self.textons < 2:
            raise ParameterError("histogram sizes must be positive")
        if self.gamma < 0:
            raise ParameterError("gamma must be non-negative")

    def angles(self) -> np.ndarray:
        return np.arange(self.orientations) * np.pi / self.orientations


@dataclass
class Channel:
    """A quantized feature plane: integer bin per pixel and the bin count."""

    name: str
    bins: np.ndarray
    nbins: int


def quantize_channel(values, nbins: int) -> np.ndarray:
    """Bin values in [0, 1] into ``nbins`` equal-width bins."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.minimum((v * nbins).astype(np.int64), nbins - 1)


def feature_planes(img) -> list[tuple[str, np.ndarray]]:
    """Brightness and, for colour input, two opponent-colour planes, all in [0, 1]."""
    img = as_image(img)
    if img.shape[2] == 1:
        return [("brightness", img[..., 0])]
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    return [
        ("brightness", (r + g + b) / 3.0),
        ("red-green", (r - g + 1.0) / 2.0),
        ("yellow-blue", ((r + g) / 2.0 - b + 1.0) / 2.0),
    ]


def filter_bank(gray: np.ndarray) -> np.ndarray:
    """Responses of oriented first/second Gaussian derivatives plus a centre-surround filter."""
    out = []
    for sigma in (1.0, 2.0):
        gy = ndimage.gaussian_filter(gray, sigma, order=(1, 0))
        gx = ndimage.gaussian_filter(gray, sigma, order=(0, 1))
        gyy = ndimage.gaussian_filter(gray, sigma, order=(2, 0))
        gxx = ndimage.gaussian_filter(gray, sigma, order=(0, 2))
        gxy = ndimage.gaussian_filter(gray, sigma, order=(1, 1))
        for t in np.arange(4) * np.pi / 4:
            c, s = np.cos(t), np.sin(t)
            out.append(c * gx + s * gy)
            out.append(c * c * gxx + 2 * c * s * gxy + s * s * gyy)
        out.append(ndimage.gaussian_laplace(gray, sigma))
    return np.stack(out, axis=-1)


def texton_map(img, k: int, seed: int) -> np.ndarray:
    """Cluster filter-bank responses into ``k`` textons (k-means++ seeding)."""
    gray = feature_planes(img)[0][1]
    resp = filter_bank(gray)
    data = resp.reshape(-1, resp.shape[-1])
    scale = data.std(axis=0)
    data = data / np.where(scale > 0, scale, 1.0)
    _, assign = kmeans2(data, k, minit="++", seed=make_rng(seed))
    return assign.reshape(gray.shape).astype(np.int64)


def channels_for(img, params: CueParams) -> list[Channel]:
    chans = [Channel(name, quantize_channel(v, params.bins), params.bins)
             for name, v in feature_planes(img)]
    if params.use_texture:
        chans.append(Channel("texture", texton_map(img, params.textons, params.seed),
                             params.textons))
    return chans


def half_disc_offsets(radius: float, theta: float):
    """Offsets ``(dy, dx)`` of the two half-discs; pixels on the dividing line are dropped.

    The line runs along ``(cos theta, sin theta)`` in (x, y) image coordinates
    with y pointing down, so ``theta = 0`` separates upper from lower halves and
    ``theta = pi/2`` separates left from right.
    """
    r = int(np.floor(radius))
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    inside = dy * dy + dx * dx <= radius * radius
    side = dy * np.cos(theta) - dx * np.sin(theta)
    tol = 1e-9
    pos = inside & (side > tol)
    neg = inside & (side < -tol)
    return np.stack([dy[pos], dx[pos]], 1), np.stack([dy[neg], dx[neg]], 1)


def _half_histograms(bins, ys, xs, offsets, nbins):
    h, w = bins.shape
    yy = ys[:, None] + offsets[None, :, 0]
    xx = xs[:, None] + offsets[None, :, 1]
    ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
    vals = bins[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
    n = len(ys)
    flat = (np.arange(n)[:, None] * nbins + vals)[ok]
    hist = np.bincount(flat, minlength=n * nbins).reshape(n, nbins).astype(np.float64)
    total = hist.sum(axis=1, keepdims=True)
    return hist / np.where(total > 0, total, 1.0), total[:, 0] > 0


def chi_squared(g, h) -> np.ndarray:
    """Row-wise chi-squared distance between normalized histograms, in [0, 1]."""
    s = g + h
    d = g - h
    terms = np.divide(d * d, s, out=np.zeros_like(s), where=s > 0)
    return 0.5 * terms.sum(axis=-1)


def oriented_gradients(bins, nbins: int, ys, xs, radius: float, angles) -> np.ndarray:
    """Half-disc chi-squared at the given pixels, shape ``(len(ys), len(angles))``.

    A half-disc with no pixel inside the image gives 0.
    """
    ys = np.asarray(ys, dtype=np.int64)
    xs = np.asarray(xs, dtype=np.int64)
    out = np.zeros((len(ys), len(angles)))
    for j, theta in enumerate(angles):
        a, b = half_disc_offsets(radius, theta)
        ga, oka = _half_histograms(bins, ys, xs, a, nbins)
        gb, okb = _half_histograms(bins, ys, xs, b, nbins)
        out[:, j] = np.where(oka & okb, chi_squared(ga, gb), 0.0)
    return out


def rescaled_logistic(x, a: float, b: float) -> np.ndarray:
    """Logistic ``1/(1+exp(-a(x-b)))`` affinely rescaled so that f(0)=0 and f(1)=1."""
    lo, hi = _sigmoid(-a * b), _sigmoid(a * (1.0 - b))
    return (_sigmoid(a * (np.asarray(x, dtype=np.float64) - b)) - lo) / (hi - lo)


def _sigmoid(t):
    return 1.0 / (1.0 + np.exp(-t))


def _weights(params: CueParams, n_channels: int) -> np.ndarray:
    n = n_channels * len(params.scales)
    if params.beta is None:
        return np.full((n_channels, len(params.scales)), 1.0 / n)
    beta = np.asarray(params.beta, dtype=np.float64)
    if beta.size != n:
        raise ParameterError(f"beta needs {n} weights (channels x scales), got {beta.size}")
    return beta.reshape(n_channels, len(params.scales))


def multiscale_gradient(img, support, params: CueParams, angles=None) -> np.ndarray:
    """Weighted sum of half-disc gradients on ``support``, shape ``(H, W, n_angles)``."""
    img = as_image(img)
    h, w = img.shape[:2]
    if max(params.scales) > min(h, w) / 2:
        raise ParameterError(
            f"disc radius {max(params.scales)} exceeds half the image size {min(h, w) / 2}")
    support = np.asarray(support, dtype=bool)
    angles = params.angles() if angles is None else np.asarray(angles, dtype=np.float64)
    chans = channels_for(img, params)
    beta = _weights(params, len(chans))
    ys, xs = np.nonzero(support)
    acc = np.zeros((len(ys), len(angles)))
    for ci, ch in enumerate(chans):
        for si, r in enumerate(params.scales):
            acc += beta[ci, si] * oriented_gradients(ch.bins, ch.nbins, ys, xs, r, angles)
    out = np.zeros((h, w, len(angles)))
    out[ys, xs] = acc
    return out


def local_cues(img, regions, params: CueParams | None = None, angles=None) -> np.ndarray:
    """Boundary strength in [0, 1] on the borders of ``regions``, zero elsewhere."""
    params = params or CueParams()
    regions = as_labels(regions)
    img = as_image(img)
    if img.shape[:2] != regions.shape:
        raise ParameterError(f"image is {img.shape[:2]}, regions are {regions.shape}")
    support = label_boundaries(regions)
    oriented = multiscale_gradient(img, support, params, angles)
    if params.use_spb:
        from .spectral import spectral_cue

        spb = spectral_cue(oriented.max(axis=-1), params, angles)
        oriented = (oriented + params.gamma * spb) / (1.0 + params.gamma)
    raw = np.clip(oriented.max(axis=-1), 0.0, 1.0)
    return np.where(support, rescaled_logistic(raw, params.logistic_a, params.logistic_b), 0.0)

"""Synthetic images with exact ground-truth partitions.

Regions are Voronoi cells of a few seed points (convex, hence connected),
each filled with its own colour.  ``gradient`` images add a linear ramp
inside every region and Gaussian noise of standard deviation ``noise`` is
added to all kinds before clipping to [0, 1].  The generator parameters of
every image are returned so they can be stored next to it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pnm import save_label_map, save_pnm
from .tensor import make_rng

KINDS = ("flat", "gradient", "noisy")


@dataclass(frozen=True)
class SynthConfig:
    count: int = 20
    size: int = 64
    min_regions: int = 2
    max_regions: int = 4
    noise: float = 0.02
    kind: str = "flat"
    channels: int = 3
    min_color_distance: float = 0.4
    gradient_amplitude: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not 1 <= self.min_regions <= self.max_regions:
            raise ValueError("need 1 <= min_regions <= max_regions")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")


def distinct_colors(n: int, channels: int, min_dist: float, rng) -> np.ndarray:
    """Rejection-sample ``n`` colours pairwise at least ``min_dist`` apart."""
    for _ in range(1000):
        cols = rng.uniform(0.1, 0.9, size=(n, channels))
        d = np.linalg.norm(cols[:, None] - cols[None], axis=-1)
        if n == 1 or d[np.triu_indices(n, 1)].min() >= min_dist:
            return cols
    raise RuntimeError(f"could not place {n} colours {min_dist} apart")


def voronoi_labels(size: int, seeds: np.ndarray) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    d = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
    return d.argmin(axis=-1).astype(np.int64)


def render(labels, colors, noise, rng, gradient=None) -> np.ndarray:
    img = colors[labels].astype(np.float64)
    if gradient is not None:
        h, w = labels.shape
        yy, xx = np.mgrid[0:h, 0:w] / max(h - 1, 1)
        ramp = gradient[labels, 0] * (yy - 0.5) + gradient[labels, 1] * (xx - 0.5)
        img = img + ramp[..., None]
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def two_region(size: int = 64, split: int | None = None, colors=None, noise: float = 0.0,
               channels: int = 3, rng=None):
    """Left/right split at column ``split``; returns (image, labels, params)."""
    rng = rng if rng is not None else make_rng(0)
    split = size // 2 if split is None else split
    if not 0 < split < size:
        raise ValueError("split must leave both regions non-empty")
    if colors is None:
        colors = np.array([[0.2] * channels, [0.8] * channels])
    colors = np.asarray(colors, dtype=np.float64).reshape(2, channels)
    labels = np.zeros((size, size), dtype=np.int64)
    labels[:, split:] = 1
    img = render(labels, colors, noise, rng)
    params = {"kind": "two_region", "size": size, "split": split,
              "colors": colors.tolist(), "noise": noise}
    return img, labels, params


def random_regions(cfg: SynthConfig, rng):
    """One image drawn according to ``cfg``; returns (image, labels, params)."""
    n = int(rng.integers(cfg.min_regions, cfg.max_regions + 1))
    size = cfg.size
    while True:
        seeds = rng.uniform(0.1 * size, 0.9 * size, size=(n, 2))
        labels = voronoi_labels(size, seeds)
        counts = np.bincount(labels.ravel(), minlength=n)
        if counts.min() >= size * size // (4 * n):
            break
    colors = distinct_colors(n, cfg.channels, cfg.min_color_distance, rng)
    gradient = None
    if cfg.kind == "gradient":
        gradient = rng.uniform(-cfg.gradient_amplitude, cfg.gradient_amplitude, size=(n, 2))
    noise = cfg.noise * (3.0 if cfg.kind == "noisy" else 1.0)
    img = render(labels, colors, noise, rng, gradient)
    params = {
        "kind": cfg.kind,
        "size": size,
        "regions": n,
        "seeds": seeds.tolist(),
        "colors": colors.tolist(),
        "noise": noise,
        "gradient": None if gradient is None else gradient.tolist(),
    }
    return img, labels, params


def generate(cfg: SynthConfig):
    """Yield ``(image_id, image, labels, params)`` for the whole corpus."""
    rng = make_rng(cfg.seed)
    for i in range(cfg.count):
        img, labels, params = random_regions(cfg, rng)
        yield f"synth_{i:04d}", img, labels, params


def write_corpus(cfg: SynthConfig, out_dir) -> list[str]:
    """Write ``images/<id>.ppm``, ``gt/<id>.pgm`` and ``gt/<id>.json`` sidecars.

    Images are stored 8-bit; the returned ids are in generation order.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    ids = []
    for image_id, img, labels, params in generate(cfg):
        save_pnm(img, out / "images" / f"{image_id}.{'ppm' if cfg.channels == 3 else 'pgm'}")
        save_label_map(labels, out / "gt" / f"{image_id}.pgm")
        (out / "gt" / f"{image_id}.json").write_text(json.dumps(params, sort_keys=True) + "\n")
        ids.append(image_id)
    return ids

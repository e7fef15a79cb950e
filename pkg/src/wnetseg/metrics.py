"""Region benchmark scores and their aggregation over a threshold grid.

For a segmentation ``S`` and annotations ``G_1..G_T`` of an image with ``N``
pixels:

* covering:  (1/T) sum_t (1/N) sum_{R in G_t} |R| max_{R' in S} |R & R'| / |R | R'|
* Rand:      (1/T) sum_t fraction of unordered pixel pairs on which S and
             G_t agree about "same region" versus "different region"
* VI:        (1/T) sum_t H(S) + H(G_t) - 2 I(S; G_t), natural logarithms

Everything is computed from the contingency table of the two label maps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import ShapeError, as_labels

DEFAULT_GRID = tuple(np.round(np.linspace(0.0, 1.0, 21), 10).tolist())
METRICS = ("sc", "pri", "vi")
HIGHER_IS_BETTER = {"sc": True, "pri": True, "vi": False}


def contingency(s, g) -> np.ndarray:
    """Joint pixel counts, rows indexed by ``s`` labels and columns by ``g`` labels."""
    s = as_labels(s)
    g = as_labels(g)
    if s.shape != g.shape:
        raise ShapeError(f"segmentation is {s.shape}, ground truth is {g.shape}")
    _, si = np.unique(s.ravel(), return_inverse=True)
    _, gi = np.unique(g.ravel(), return_inverse=True)
    table = np.zeros((si.max() + 1, gi.max() + 1), dtype=np.int64)
    np.add.at(table, (si, gi), 1)
    return table


def _gts(gts) -> list[np.ndarray]:
    if isinstance(gts, np.ndarray) and gts.ndim == 2:
        gts = [gts]
    gts = list(gts)
    if not gts:
        raise ValueError("at least one ground-truth segmentation is required")
    return gts


def _covering(table) -> float:
    # table rows: segmentation regions, columns: ground-truth regions
    size_s = table.sum(axis=1)[:, None]
    size_g = table.sum(axis=0)[None, :]
    iou = table / (size_s + size_g - table)
    return float((size_g[0] * iou.max(axis=0)).sum() / table.sum())


def _pairs(x):
    x = x.astype(np.int64)
    return x * (x - 1) // 2


def _rand(table) -> float:
    n = int(table.sum())
    total = n * (n - 1) // 2
    if total == 0:
        return 1.0
    both = int(_pairs(table).sum())
    same_s = int(_pairs(table.sum(axis=1)).sum())
    same_g = int(_pairs(table.sum(axis=0)).sum())
    agree = total - same_s - same_g + 2 * both
    return agree / total


def _vi(table) -> float:
    # H(S|G) + H(G|S) from counts; a region pair matching exactly contributes log(1) = 0
    rows, cols = np.nonzero(table)
    nij = table[rows, cols].astype(np.float64)
    a = table.sum(axis=1)[rows]
    b = table.sum(axis=0)[cols]
    return float((nij * (np.log(a / nij) + np.log(b / nij))).sum() / table.sum())


def segmentation_covering(s, gts) -> float:
    gts = _gts(gts)
    return float(np.mean([_covering(contingency(s, g)) for g in gts]))


def probabilistic_rand(s, gts) -> float:
    gts = _gts(gts)
    return float(np.mean([_rand(contingency(s, g)) for g in gts]))


def variation_of_information(s, gts) -> float:
    gts = _gts(gts)
    return float(np.mean([_vi(contingency(s, g)) for g in gts]))


def score_all(s, gts) -> dict[str, float]:
    gts = _gts(gts)
    tables = [contingency(s, g) for g in gts]
    return {
        "sc": float(np.mean([_covering(t) for t in tables])),
        "pri": float(np.mean([_rand(t) for t in tables])),
        "vi": float(np.mean([_vi(t) for t in tables])),
    }


@dataclass
class EvalRecord:
    image_id: str
    thresholds: np.ndarray
    sc: np.ndarray
    pri: np.ndarray
    vi: np.ndarray
    gt_count: int

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        for m in METRICS:
            arr = np.asarray(getattr(self, m), dtype=np.float64)
            if arr.shape != self.thresholds.shape:
                raise ValueError(f"{self.image_id}: {m} scores do not match the threshold grid")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{self.image_id}: non-finite {m} score")
            setattr(self, m, arr)
        if np.any(np.diff(self.thresholds) <= 0):
            raise ValueError(f"{self.image_id}: thresholds must be strictly increasing")


def evaluate_hierarchy(image_id: str, segment_at, gts, thresholds=DEFAULT_GRID) -> EvalRecord:
    """Score ``segment_at(t)`` against ``gts`` for every threshold ``t``."""
    gts = _gts(gts)
    rows = [score_all(segment_at(t), gts) for t in thresholds]
    return EvalRecord(image_id, np.asarray(thresholds, dtype=np.float64),
                      *(np.array([r[m] for r in rows]) for m in METRICS), len(gts))


@dataclass
class Summary:
    ods: dict[str, float]
    ois: dict[str, float]
    ods_threshold: dict[str, float]
    images: int

    def table(self, method: str = "W-Net") -> str:
        header = ["Method", "SC ODS", "SC OIS", "PRI ODS", "PRI OIS", "VI ODS", "VI OIS"]
        row = [method] + [f"{d[m]:.4f}" for m in METRICS for d in (self.ods, self.ois)]
        widths = [max(len(a), len(b)) for a, b in zip(header, row)]
        fmt = "  ".join(f"{{:<{w}}}" if i == 0 else f"{{:>{w}}}" for i, w in enumerate(widths))
        return fmt.format(*header) + "\n" + fmt.format(*row) + "\n"


def ods_ois(records: Sequence[EvalRecord]) -> Summary:
    """Optimal dataset scale and optimal image scale for every metric.

    ODS picks the single grid threshold with the best dataset mean (the first
    such threshold on ties); OIS averages each image's own best score.
    """
    if not records:
        raise ValueError("no records to aggregate")
    grid = records[0].thresholds
    for r in records[1:]:
        if r.thresholds.shape != grid.shape or np.any(r.thresholds != grid):
            raise ValueError(f"{r.image_id}: threshold grid differs from {records[0].image_id}")
    ods, ois, at = {}, {}, {}
    for m in METRICS:
        scores = np.stack([getattr(r, m) for r in records])
        mean = scores.mean(axis=0)
        if HIGHER_IS_BETTER[m]:
            best = int(np.argmax(mean))
            ois[m] = float(scores.max(axis=1).mean())
        else:
            best = int(np.argmin(mean))
            ois[m] = float(scores.min(axis=1).mean())
        ods[m] = float(mean[best])
        at[m] = float(grid[best])
    return Summary(ods, ois, at, len(records))


def write_report(records: Sequence[EvalRecord], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "threshold", *METRICS])
        for r in records:
            for i, t in enumerate(r.thresholds):
                w.writerow([r.image_id, f"{t:.6g}", *(f"{getattr(r, m)[i]:.12g}" for m in METRICS)])


def read_report(path) -> list[EvalRecord]:
    rows: dict[str, list[list[float]]] = {}
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["image", "threshold", *METRICS]:
            raise ValueError(f"{path} is not an evaluation report")
        for image, *vals in reader:
            rows.setdefault(image, []).append([float(v) for v in vals])
    out = []
    for image, vals in rows.items():
        arr = np.array(vals)
        out.append(EvalRecord(image, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], 0))
    return out

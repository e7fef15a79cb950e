"""Initial over-segmentation: connected components with speck absorption."""

from __future__ import annotations

from collections import defaultdict

import numpy as np
from scipy import ndimage

from ..tensor import as_labels

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def connected_components(labels) -> np.ndarray:
    """4-connected components of equal label, numbered in raster order of first pixel."""
    labels = as_labels(labels)
    out = np.zeros(labels.shape, dtype=np.int64)
    offset = 0
    for value in np.unique(labels):
        comp, n = ndimage.label(labels == value, structure=FOUR_CONNECTED)
        out[comp > 0] = comp[comp > 0] + offset
        offset += n
    # numbering by first occurrence keeps the result independent of label values
    return compact_raster(out)


def adjacency_counts(regions) -> dict[tuple[int, int], int]:
    """Number of 4-adjacent pixel pairs between every pair of touching regions."""
    regions = as_labels(regions)
    a = np.concatenate([regions[:, :-1].ravel(), regions[:-1, :].ravel()])
    b = np.concatenate([regions[:, 1:].ravel(), regions[1:, :].ravel()])
    differ = a != b
    lo = np.minimum(a[differ], b[differ])
    hi = np.maximum(a[differ], b[differ])
    pairs, counts = np.unique(np.stack([lo, hi], axis=1), axis=0, return_counts=True)
    return {(int(p), int(q)): int(c) for (p, q), c in zip(pairs, counts)}


def absorb_specks(regions, min_area: int) -> np.ndarray:
    """Merge every region smaller than ``min_area`` pixels into a neighbour.

    The smallest speck (lowest index on ties) goes first, into the neighbour
    sharing the longest border (lowest index on ties).  Areas and borders are
    updated after every merge.  The result is relabelled contiguously.
    """
    regions = as_labels(regions)
    n = int(regions.max()) + 1 if regions.size else 0
    area = np.bincount(regions.ravel(), minlength=n).astype(np.int64)
    border: dict[int, dict[int, int]] = defaultdict(dict)
    for (a, b), c in adjacency_counts(regions).items():
        border[a][b] = c
        border[b][a] = c
    parent = np.arange(n)
    alive = set(np.flatnonzero(area > 0).tolist())
    while len(alive) > 1:
        small = [r for r in alive if area[r] < min_area and border[r]]
        if not small:
            break
        r = min(small, key=lambda x: (area[x], x))
        target = min(border[r], key=lambda x: (-border[r][x], x))
        for c, cnt in border.pop(r).items():
            del border[c][r]
            if c != target:
                border[target][c] = border[target].get(c, 0) + cnt
                border[c][target] = border[target][c]
        area[target] += area[r]
        area[r] = 0
        parent[r] = target
        alive.discard(r)
    # resolve chains of absorptions
    for i in range(n):
        root = i
        while parent[root] != root:
            root = parent[root]
        parent[i] = root
    return compact_raster(parent[regions])


def compact_raster(labels) -> np.ndarray:
    """Relabel to 0..L-1 in raster order of first appearance."""
    labels = as_labels(labels)
    flat = labels.ravel()
    _, first, inv = np.unique(flat, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    return rank[inv].reshape(labels.shape).astype(np.int64)


def initial_regions(labels, min_area: int = 4) -> np.ndarray:
    """Contiguous region map seeding the merge hierarchy."""
    comps = connected_components(labels)
    if min_area <= 1:
        return comps
    return absorb_specks(comps, min_area)

"""Greedy region merging into an ultrametric contour map.

Two regions are adjacent when some pixel of one has a 4-neighbour in the
other; the pixels on either side of that contact form their border.  The
weight of an adjacency is the mean boundary strength over its border
pixels.  The adjacency with the smallest ``(weight, a, b)`` is merged, the
merged region takes the smaller id, its borders with the remaining regions
are the unions of the member borders, and the recorded strength is the
larger of the weight and the previous recorded strength, so strengths never
decrease along the merge list.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..tensor import as_labels, compact


class StructuralError(ValueError):
    pass


@dataclass
class UcmHierarchy:
    initial: np.ndarray
    merges: list[tuple[int, int, float]]
    ucm: np.ndarray

    @property
    def strengths(self) -> np.ndarray:
        return np.array([s for _, _, s in self.merges], dtype=np.float64)


def _pixel_pairs(regions):
    """4-adjacent pixel pairs ``(p, q)`` (flat indices) whose regions differ."""
    h, w = regions.shape
    idx = np.arange(h * w).reshape(h, w)
    p = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    q = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    flat = regions.ravel()
    keep = flat[p] != flat[q]
    return p[keep], q[keep]


def region_borders(regions) -> dict[tuple[int, int], set[int]]:
    """Border pixel sets keyed by region pair ``(a, b)`` with ``a < b``."""
    regions = as_labels(regions)
    flat = regions.ravel()
    borders: dict[tuple[int, int], set[int]] = {}
    for p, q in zip(*_pixel_pairs(regions)):
        a, b = int(flat[p]), int(flat[q])
        key = (a, b) if a < b else (b, a)
        s = borders.setdefault(key, set())
        s.add(int(p))
        s.add(int(q))
    return borders


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union_into(self, keep, gone):
        self.parent[self.find(gone)] = self.find(keep)


def build_ucm(regions, boundary) -> UcmHierarchy:
    """Merge ``regions`` down to one region using ``boundary`` strengths."""
    regions = as_labels(regions)
    boundary = np.asarray(boundary, dtype=np.float64)
    if boundary.shape != regions.shape:
        raise ValueError(f"boundary is {boundary.shape}, regions are {regions.shape}")
    n = int(regions.max()) + 1 if regions.size else 0
    present = np.bincount(regions.ravel(), minlength=n) > 0
    if not present.all():
        raise ValueError("region labels must be contiguous 0..L-1")
    strength = boundary.ravel()
    borders = region_borders(regions)
    neigh: dict[int, dict[int, set[int]]] = {r: {} for r in range(n)}
    for (a, b), pix in borders.items():
        neigh[a][b] = pix
        neigh[b][a] = pix
    heap = []
    for (a, b), pix in borders.items():
        heap.append((_mean(strength, pix), a, b))
    heapq.heapify(heap)
    alive = set(range(n))
    merges: list[tuple[int, int, float]] = []
    level = 0.0
    while heap:
        wt, a, b = heapq.heappop(heap)
        # stale entries refer to a merged region or an updated border
        if a not in alive or b not in alive or b not in neigh[a]:
            continue
        if wt != _mean(strength, neigh[a][b]):
            continue
        level = max(level, wt)
        merges.append((a, b, level))
        keep, gone = a, b
        alive.discard(gone)
        for c, pix in neigh.pop(gone).items():
            del neigh[c][gone]
            if c == keep:
                continue
            joined = neigh[keep].get(c, set()) | pix
            neigh[keep][c] = joined
            neigh[c][keep] = joined
        for c, pix in neigh[keep].items():
            x, y = (keep, c) if keep < c else (c, keep)
            heapq.heappush(heap, (_mean(strength, pix), x, y))
    if len(alive) > 1:
        raise StructuralError(
            f"region adjacency graph is disconnected: {len(alive)} components remain")
    return UcmHierarchy(regions.copy(), merges, _ucm_image(regions, merges))


def _mean(strength, pix) -> float:
    return float(strength[np.fromiter(pix, dtype=np.int64)].mean())


def _ucm_image(regions, merges) -> np.ndarray:
    h, w = regions.shape
    out = np.zeros(h * w)
    p, q = _pixel_pairs(regions)
    if len(p) == 0:
        return out.reshape(h, w)
    flat = regions.ravel()
    n = int(flat.max()) + 1
    a, b = flat[p], flat[q]
    # pixel pairs touching each initial region
    ends = np.concatenate([a, b])
    order = np.argsort(ends, kind="stable")
    starts = np.searchsorted(ends[order], np.arange(n + 1))
    pair_of = order % len(p)
    touching = [pair_of[starts[r] : starts[r + 1]] for r in range(n)]
    # the distance between two initial regions is the strength of the merge joining them
    comp = np.arange(n)
    members = {r: [r] for r in range(n)}
    dist = np.full(len(p), np.nan)
    pending = np.ones(len(p), dtype=bool)
    for x, y, s in merges:
        cx, cy = comp[x], comp[y]
        small, big = (cx, cy) if len(members[cx]) < len(members[cy]) else (cy, cx)
        moved = members.pop(small)
        comp[moved] = big
        members[big].extend(moved)
        cand = np.concatenate([touching[m] for m in moved])
        cand = cand[pending[cand] & (comp[a[cand]] == comp[b[cand]])]
        dist[cand] = s
        pending[cand] = False
    if pending.any():
        raise StructuralError("merge list leaves adjacent regions unjoined")
    np.maximum.at(out, p, dist)
    np.maximum.at(out, q, dist)
    return out.reshape(h, w)


def threshold_ucm(hier: UcmHierarchy, t: float) -> np.ndarray:
    """Segmentation after applying every merge with strength <= ``t``."""
    n = int(hier.initial.max()) + 1 if hier.initial.size else 0
    uf = _UnionFind(n)
    for a, b, s in hier.merges:
        if s <= t:
            uf.union_into(a, b)
    roots = np.array([uf.find(r) for r in range(n)], dtype=np.int64)
    return compact(roots[hier.initial])


def write_merges(hier: UcmHierarchy, path) -> None:
    lines = [f"{a} {b} {s:.17g}" for a, b, s in hier.merges]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_merges(path) -> list[tuple[int, int, float]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            a, b, s = line.split()
            out.append((int(a), int(b), float(s)))
    return out

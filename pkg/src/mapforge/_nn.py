"""Planar nearest-neighbor search: uniform grid hash with a dense fallback.

The grid buckets points by cell of a fixed size; queries gather the 3x3
neighborhood, which is exact for matches within one cell size, and re-scan
the whole set for queries the grid misses. Below a size crossover the dense
scan is used outright since vectorized broadcasting beats per-point hashing
there.
"""

from __future__ import annotations

import numpy as np

# |X| * |Y| below which a broadcasted full scan is cheaper than grid probing
DENSE_CROSSOVER = 262144


class GridIndex:
    """Uniform grid hash over 2D points with cell size h."""

    def __init__(self, points: np.ndarray, cell: float):
        if cell <= 0:
            raise ValueError("cell size must be positive")
        self.points = np.asarray(points, dtype=np.float64)
        self.cell = float(cell)
        cells = np.floor(self.points / self.cell).astype(np.int64)
        buckets: dict[tuple[int, int], list[int]] = {}
        for idx, (cx, cy) in enumerate(cells):
            buckets.setdefault((int(cx), int(cy)), []).append(idx)
        self.buckets = {k: np.array(v, dtype=np.intp) for k, v in buckets.items()}

    def candidates(self, q: np.ndarray) -> np.ndarray:
        """Indices of points in the 3x3 cell neighborhood around q."""
        cx = int(np.floor(q[0] / self.cell))
        cy = int(np.floor(q[1] / self.cell))
        hits = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                b = self.buckets.get((cx + dx, cy + dy))
                if b is not None:
                    hits.append(b)
        if not hits:
            return np.empty(0, dtype=np.intp)
        return np.concatenate(hits)

    def nearest_within(self, q: np.ndarray, max_dist: float):
        """(index, distance) of nearest point within max_dist, or (None, inf).

        Exact when max_dist <= cell: anything outside the 3x3 neighborhood is
        farther than one cell away.
        """
        cand = self.candidates(q)
        if cand.size == 0:
            return None, np.inf
        d = np.linalg.norm(self.points[cand] - q, axis=1)
        j = int(np.argmin(d))
        if d[j] <= max_dist:
            return int(cand[j]), float(d[j])
        return None, np.inf


def nearest_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """For each row of x, the distance to its nearest row of y. Exact."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] * y.shape[0] <= DENSE_CROSSOVER:
        d2 = _pairwise_sq(x, y)
        return np.sqrt(d2.min(axis=1))
    return _grid_nearest(x, y)[1]


def nearest_indices_dists(x: np.ndarray, y: np.ndarray):
    """For each row of x, (index, distance) of its nearest row of y. Exact."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] * y.shape[0] <= DENSE_CROSSOVER:
        d2 = _pairwise_sq(x, y)
        idx = d2.argmin(axis=1)
        return idx, np.sqrt(d2[np.arange(x.shape[0]), idx])
    return _grid_nearest(x, y)


def _pairwise_sq(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # (a-b)^2 expansion keeps the intermediate at |X|x|Y| instead of |X|x|Y|x2
    d2 = (
        (x * x).sum(axis=1)[:, None]
        + (y * y).sum(axis=1)[None, :]
        - 2.0 * (x @ y.T)
    )
    np.maximum(d2, 0.0, out=d2)
    return d2


def _grid_nearest(x: np.ndarray, y: np.ndarray):
    # cell size ~ expected spacing so most queries resolve in the 3x3 probe
    span = y.max(axis=0) - y.min(axis=0)
    diag = float(np.hypot(span[0], span[1]))
    cell = max(diag / max(np.sqrt(y.shape[0]), 1.0), 1e-9)
    grid = GridIndex(y, cell)
    idx = np.empty(x.shape[0], dtype=np.intp)
    dist = np.empty(x.shape[0])
    misses = []
    for i, q in enumerate(x):
        j, d = grid.nearest_within(q, cell)
        if j is None:
            misses.append(i)
        else:
            idx[i], dist[i] = j, d
    if misses:
        m = np.array(misses, dtype=np.intp)
        d2 = _pairwise_sq(x[m], y)
        jm = d2.argmin(axis=1)
        idx[m] = jm
        dist[m] = np.sqrt(d2[np.arange(m.size), jm])
    return idx, dist

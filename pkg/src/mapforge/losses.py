"""Training objectives for self-supervised map optimization.

Four ingredients: a binary cross-entropy occupancy loss over scan endpoints
(label 1) and free-space samples between sensor and endpoint (label 0); a
symmetric Chamfer distance between global clouds; a point-set metric for
the disagreement of two transforms applied to one cloud; and the batch
consistency loss that compares an anchor's direct global placement with
its placement through each neighbor's pose and the precomputed
anchor-to-neighbor transform. Every loss has an explicit gradient
companion used by the trainer; all are plain float64 numpy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._nn import nearest_indices_dists
from .geometry import Pose, PointCloud
from .nets import (
    NetParams,
    compose_se2,
    mnet_backward,
    mnet_forward,
    transform_points_se2,
    transform_points_se2_backward,
)

BCE_EPS = 1e-7


@dataclass
class LossWeights:
    chamfer: float = 0.1
    consistency: float = 1.0

    def __post_init__(self) -> None:
        if not (np.isfinite(self.chamfer) and np.isfinite(self.consistency)):
            raise ValueError("loss weights must be finite")
        if self.chamfer < 0 or self.consistency < 0:
            raise ValueError("loss weights must be non-negative")


def _pts(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def _params(pose) -> np.ndarray:
    return pose.params() if isinstance(pose, Pose) else np.asarray(pose, dtype=np.float64)


# ---------------------------------------------------------------------------
# binary cross entropy


def bce(p, y) -> float:
    """-y log p - (1-y) log(1-p) with p clamped to [eps, 1-eps]."""
    p_hat = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return float(-y * np.log(p_hat) - (1.0 - y) * np.log(1.0 - p_hat))


def bce_vec(p: np.ndarray, y: float) -> np.ndarray:
    p_hat = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return -y * np.log(p_hat) - (1.0 - y) * np.log1p(-p_hat)


def bce_vec_grad(p: np.ndarray, y: float) -> np.ndarray:
    """d bce/dp; zero where the clamp is active."""
    inside = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
    p_hat = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return np.where(inside, (p_hat - y) / (p_hat * (1.0 - p_hat)), 0.0)


# ---------------------------------------------------------------------------
# free-space sampling


@dataclass
class FreeSpaceSamples:
    """Unoccupied-label samples strictly between sensor origin and endpoints.

    coords are the sample positions at draw time; fractions and point_index
    let the trainer re-derive coordinates (and route gradients) after the
    frame's pose has moved.
    """

    coords: np.ndarray
    fractions: np.ndarray
    point_index: np.ndarray
    frame_index: int = -1
    label: int = field(default=0)


def draw_free_fractions(num_points: int, n_per_ray: int, rng: np.random.Generator):
    """Per-(point, draw) fractions u ~ U(0.05, 0.95), point-major order."""
    if n_per_ray < 1:
        raise ValueError("n_per_ray must be >= 1")
    u = rng.uniform(0.05, 0.95, size=num_points * n_per_ray)
    point_index = np.repeat(np.arange(num_points), n_per_ray)
    return u, point_index


def free_space_coords(points: np.ndarray, origin: np.ndarray, u: np.ndarray, point_index: np.ndarray) -> np.ndarray:
    return origin + u[:, None] * (points[point_index] - origin)


def sample_free_space(cloud, origin, n_per_ray: int, rng: np.random.Generator, frame_index: int = -1) -> FreeSpaceSamples:
    """Draw n_per_ray free-space points on every origin-to-endpoint ray."""
    pts = _pts(cloud)
    if pts.shape[0] == 0:
        raise ValueError("cannot sample free space of an empty cloud")
    origin = np.asarray(origin, dtype=np.float64)
    u, point_index = draw_free_fractions(pts.shape[0], n_per_ray, rng)
    coords = free_space_coords(pts, origin, u, point_index)
    return FreeSpaceSamples(coords=coords, fractions=u, point_index=point_index, frame_index=frame_index)


# ---------------------------------------------------------------------------
# occupancy loss (per-frame terms are per-point means)


def occupancy_loss(mnet: NetParams, global_clouds, origins, samples) -> float:
    """Mean over frames of: mean bce(m(G_i), 1) + mean bce(m(s(G_i)), 0)."""
    if len(global_clouds) == 0:
        raise ValueError("occupancy loss needs at least one frame")
    total = 0.0
    for cloud, smp in zip(global_clouds, samples):
        pts = _pts(cloud)
        if pts.shape[0] == 0:
            raise ValueError("occupancy loss saw an empty frame")
        occ_p, _ = mnet_forward(mnet, pts)
        free_p, _ = mnet_forward(mnet, smp.coords)
        total += float(bce_vec(occ_p, 1.0).mean()) + float(bce_vec(free_p, 0.0).mean())
    return total / len(global_clouds)


# ---------------------------------------------------------------------------
# Chamfer distance


def chamfer(x, y) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets."""
    xp, yp = _pts(x), _pts(y)
    if xp.shape[0] == 0 or yp.shape[0] == 0:
        raise ValueError("chamfer requires nonempty clouds")
    _, dx = nearest_indices_dists(xp, yp)
    _, dy = nearest_indices_dists(yp, xp)
    return float(dx.mean() + dy.mean())


def chamfer_with_grad(xp: np.ndarray, yp: np.ndarray):
    """(value, d/dx, d/dy); the nearest-neighbor pairing is held fixed."""
    ix, dx = nearest_indices_dists(xp, yp)
    iy, dy = nearest_indices_dists(yp, xp)
    gx = np.zeros_like(xp)
    gy = np.zeros_like(yp)

    ok = dx > 0.0
    diff = (xp[ok] - yp[ix[ok]]) / (dx[ok, None] * xp.shape[0])
    gx[ok] += diff
    np.add.at(gy, ix[ok], -diff)

    ok = dy > 0.0
    diff = (yp[ok] - xp[iy[ok]]) / (dy[ok, None] * yp.shape[0])
    gy[ok] += diff
    np.add.at(gx, iy[ok], -diff)

    return float(dx.mean() + dy.mean()), gx, gy


# ---------------------------------------------------------------------------
# transform-inconsistency metric and the batch consistency loss


def pose_inconsistency(t, t_prime, s) -> float:
    """Mean per-point distance between a cloud under two transforms."""
    pts = _pts(s)
    if pts.shape[0] == 0:
        raise ValueError("pose_inconsistency requires a nonempty cloud")
    if isinstance(t, Pose) and isinstance(t_prime, Pose) and t.dimension != t_prime.dimension:
        raise ValueError("pose dimension mismatch")
    if isinstance(t, Pose) and t.dimension == "SE3":
        a = pts @ t.rotation_matrix().T + t.translation
        b = pts @ t_prime.rotation_matrix().T + t_prime.translation
    else:
        a = transform_points_se2(_params(t), pts)
        b = transform_points_se2(_params(t_prime), pts)
    return float(np.linalg.norm(a - b, axis=1).mean())


def pose_inconsistency_with_grad(p1: np.ndarray, p2: np.ndarray, pts: np.ndarray):
    """(value, d/dp1, d/dp2) for SE2 parameter triples."""
    a = transform_points_se2(p1, pts)
    b = transform_points_se2(p2, pts)
    diff = a - b
    d = np.linalg.norm(diff, axis=1)
    val = float(d.mean())
    safe = np.where(d > 0.0, d, 1.0)
    upstream = np.where(d[:, None] > 0.0, diff / (safe[:, None] * pts.shape[0]), 0.0)
    g1 = transform_points_se2_backward(p1, pts, upstream)
    g2 = transform_points_se2_backward(p2, pts, -upstream)
    return val, g1, g2


def consistency_loss(batches, global_poses, clouds) -> float:
    """Anchor-vs-neighbor placement disagreement, averaged per Eq-style
    normalization: per-anchor mean over neighbors, then mean over anchors.

    For neighbor j of anchor i, the anchor cloud placed via the neighbor,
    compose(T_j, T_j_i), is compared against its direct placement T_i.
    """
    if not batches:
        raise ValueError("no batches")
    total = 0.0
    for batch in batches:
        if batch.pairwise is None:
            raise ValueError(f"batch {batch.anchor} is missing pairwise transforms")
        pts = _pts(clouds[batch.anchor])
        anchor_p = _params(global_poses[batch.anchor])
        acc = 0.0
        for j, t_ji in zip(batch.neighbors, batch.pairwise):
            via = compose_se2(_params(global_poses[j]), _params(t_ji))
            acc += pose_inconsistency(via, anchor_p, pts)
        total += acc / len(batch.neighbors)
    return total / len(batches)


def total_loss(occupancy: float, chamfer_term: float, consistency: float, w: LossWeights) -> float:
    """Weighted objective: occupancy + w.chamfer * chamfer + w.consistency * consistency."""
    vals = (occupancy, chamfer_term, consistency)
    if not all(np.isfinite(v) for v in vals):
        raise ValueError(f"non-finite loss component: {vals}")
    return occupancy + w.chamfer * chamfer_term + w.consistency * consistency

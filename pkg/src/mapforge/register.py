"""Point-to-point ICP for planar scans.

Used twice downstream: chaining consecutive frames into a warm-start
trajectory, and estimating anchor-to-neighbor transforms for the
consistency objective. Correspondences come from a uniform grid hash with
cell size equal to the correspondence cutoff (exact for capped matching);
the per-iteration rigid fit is the closed-form 2D least-squares solution.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ._nn import DENSE_CROSSOVER, GridIndex, _pairwise_sq
from .geometry import Pose, PointCloud, compose, transform_points, wrap_angle


@dataclass
class IcpConfig:
    max_iterations: int = 50
    convergence_eps: float = 1e-5
    max_correspondence_dist: float = 1.0
    min_inliers: int = 10

    def __post_init__(self) -> None:
        if min(self.max_iterations, self.min_inliers) <= 0:
            raise ValueError("iteration and inlier counts must be positive")
        if self.convergence_eps <= 0 or self.max_correspondence_dist <= 0:
            raise ValueError("convergence_eps and max_correspondence_dist must be positive")


@dataclass
class IcpResult:
    relative_pose: Pose
    mean_residual: float
    iterations: int
    converged: bool


def _capped_matches(src: np.ndarray, grid: GridIndex, target: np.ndarray, cap: float):
    """Indices/distances of target matches within cap; -1 where none."""
    n = src.shape[0]
    if n * target.shape[0] <= DENSE_CROSSOVER:
        d2 = _pairwise_sq(src, target)
        idx = d2.argmin(axis=1)
        dist = np.sqrt(d2[np.arange(n), idx])
        idx = np.where(dist <= cap, idx, -1)
        return idx, dist
    idx = np.full(n, -1, dtype=np.intp)
    dist = np.full(n, np.inf)
    for i, q in enumerate(src):
        j, d = grid.nearest_within(q, cap)
        if j is not None:
            idx[i], dist[i] = j, d
    return idx, dist


def _fit_rigid_2d(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Closed-form rotation+translation minimizing sum ||R s + t - d||^2."""
    sc = src.mean(axis=0)
    dc = dst.mean(axis=0)
    s0 = src - sc
    d0 = dst - dc
    # cross-covariance terms feed a single atan2: no scale, no SVD needed in 2D
    num = float(np.sum(s0[:, 0] * d0[:, 1] - s0[:, 1] * d0[:, 0]))
    den = float(np.sum(s0[:, 0] * d0[:, 0] + s0[:, 1] * d0[:, 1]))
    theta = np.arctan2(num, den)
    c, s = np.cos(theta), np.sin(theta)
    t = dc - np.array([c * sc[0] - s * sc[1], s * sc[0] + c * sc[1]])
    return Pose.se2(t[0], t[1], theta)


def icp_pairwise(source: PointCloud, target: PointCloud, init: Pose, cfg: IcpConfig) -> IcpResult:
    """Estimate the pose mapping `source` points into `target`'s frame.

    Iterates nearest-neighbor matching (capped at max_correspondence_dist)
    with the closed-form rigid fit, starting from `init`. Stops when the
    mean residual changes by less than convergence_eps. If an iteration
    finds fewer than min_inliers matches, returns the last estimate flagged
    as not converged.
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("ICP requires nonempty clouds")
    src = source.points
    tgt = target.points
    grid = GridIndex(tgt, cfg.max_correspondence_dist)
    pose = init
    prev_residual = None
    residual = np.inf
    for it in range(1, cfg.max_iterations + 1):
        moved = transform_points(pose, src)
        idx, dist = _capped_matches(moved, grid, tgt, cfg.max_correspondence_dist)
        inliers = idx >= 0
        if int(inliers.sum()) < cfg.min_inliers:
            return IcpResult(pose, float(residual if np.isfinite(residual) else 0.0), it, False)
        pose = _fit_rigid_2d(src[inliers], tgt[idx[inliers]])
        moved = transform_points(pose, src[inliers])
        residual = float(np.linalg.norm(moved - tgt[idx[inliers]], axis=1).mean())
        if prev_residual is not None and abs(prev_residual - residual) < cfg.convergence_eps:
            return IcpResult(pose, residual, it, True)
        prev_residual = residual
    return IcpResult(pose, residual, cfg.max_iterations, True)


def incremental_warm_start(dataset, cfg: IcpConfig | None = None) -> list:
    """Chain consecutive pairwise registrations into global init poses.

    pose[0] is the identity; pose[i] composes the previous global pose with
    the ICP estimate of frame i against frame i-1. Non-converged links fall
    back to the previous relative pose (constant velocity) with a warning.
    """
    cfg = cfg or IcpConfig()
    poses = [Pose.identity()]
    prev_rel = Pose.identity()
    for i in range(1, len(dataset.clouds)):
        res = icp_pairwise(dataset.clouds[i], dataset.clouds[i - 1], prev_rel, cfg)
        if res.converged:
            rel = res.relative_pose
        else:
            warnings.warn(
                f"ICP did not converge on frames {i}->{i - 1}; "
                "falling back to previous relative pose",
                stacklevel=2,
            )
            rel = prev_rel
        poses.append(compose(poses[-1], rel))
        prev_rel = rel
    return poses

"""Synthetic 2D LiDAR data: wall-segment environments, closed-loop
trajectories, and noisy raycast scans with ground-truth poses.

Scans are generated per frame from a counter-based random stream keyed by
(seed, frame), so datasets are bit-reproducible and frames can be generated
in any order. Ranges get additive Gaussian noise; angles are exact; beams
that hit nothing inside max_range are dropped.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from ._rng import STREAM_SCAN, keyed_rng
from .geometry import Pose, PointCloud

DATASET_VERSION = 1


class DegenerateScanError(RuntimeError):
    """A viewpoint produced fewer hit points than the minimum scan size."""


@dataclass
class Environment:
    """A set of wall segments, each row ((x0, y0), (x1, y1)) in meters."""

    segments: np.ndarray

    def __post_init__(self) -> None:
        self.segments = np.asarray(self.segments, dtype=np.float64)
        if self.segments.ndim != 3 or self.segments.shape[1:] != (2, 2):
            raise ValueError(f"segments must be (M, 2, 2), got {self.segments.shape}")
        if self.segments.shape[0] < 3:
            raise ValueError("environment needs at least 3 segments")
        lengths = np.linalg.norm(self.segments[:, 1] - self.segments[:, 0], axis=1)
        if np.any(lengths == 0.0):
            raise ValueError("zero-length wall segment")


@dataclass
class ScanConfig:
    num_beams: int = 256
    fov: float = 2.0 * np.pi
    max_range: float = 10.0
    range_noise_sigma: float = 0.01
    seed: int = 0
    min_points: int = 8

    def __post_init__(self) -> None:
        if self.num_beams < 8:
            raise ValueError("num_beams must be >= 8")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if self.range_noise_sigma < 0:
            raise ValueError("range_noise_sigma must be >= 0")


@dataclass
class Dataset:
    """K scans with ground-truth poses and, once computed, initial poses."""

    clouds: list
    gt_poses: list
    init_poses: list = field(default=None)

    def __post_init__(self) -> None:
        k = len(self.clouds)
        if k < 2:
            raise ValueError("a dataset needs at least 2 frames")
        if len(self.gt_poses) != k:
            raise ValueError("clouds and gt_poses must have equal length")
        if self.init_poses is not None and len(self.init_poses) != k:
            raise ValueError("init_poses length must match clouds")

    def __len__(self) -> int:
        return len(self.clouds)


def rectangle(cx: float, cy: float, width: float, height: float) -> np.ndarray:
    """Four wall segments of an axis-aligned rectangle (counter-clockwise)."""
    hw, hh = width / 2.0, height / 2.0
    corners = np.array(
        [[cx - hw, cy - hh], [cx + hw, cy - hh], [cx + hw, cy + hh], [cx - hw, cy + hh]]
    )
    return np.stack([np.stack([corners[i], corners[(i + 1) % 4]]) for i in range(4)])


def default_scene(width: float = 18.0, height: float = 12.0) -> Environment:
    """Rectangular room with two asymmetric interior obstacles.

    The broken symmetry matters: range-histogram descriptors must not alias
    distinct locations in the reference scene.
    """
    segs = [rectangle(0.0, 0.0, width, height)]
    segs.append(rectangle(-width * 0.22, -height * 0.07, 2.4, 1.6))
    segs.append(rectangle(width * 0.2, height * 0.08, 1.6, 2.4))
    return Environment(np.concatenate(segs, axis=0))


def loop_trajectory(waypoints: np.ndarray, num_frames: int, laps: int = 1) -> list:
    """Closed-loop SE2 trajectory through waypoint polygon corners.

    Positions are spaced uniformly by arc length around the closed polygon,
    traversed `laps` times; the heading at each frame is the direction of
    travel. The last frame stops just short of closing, so every location
    is revisited laps times (or once at the seam for a single lap).
    """
    wp = np.asarray(waypoints, dtype=np.float64)
    if wp.ndim != 2 or wp.shape[0] < 3 or wp.shape[1] != 2:
        raise ValueError("waypoints must be (n >= 3, 2)")
    if num_frames < 2:
        raise ValueError("num_frames must be >= 2")
    if laps < 1:
        raise ValueError("laps must be >= 1")
    closed = np.vstack([wp, wp[0]])
    seg_vec = np.diff(closed, axis=0)
    seg_len = np.linalg.norm(seg_vec, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    poses = []
    for i in range(num_frames):
        s = (total * laps * i / num_frames) % total
        j = min(np.searchsorted(cum, s, side="right") - 1, len(seg_len) - 1)
        frac = (s - cum[j]) / seg_len[j]
        pos = closed[j] + frac * seg_vec[j]
        heading = np.arctan2(seg_vec[j][1], seg_vec[j][0])
        poses.append(Pose.se2(pos[0], pos[1], heading))
    return poses


def default_loop(
    env_width: float = 18.0,
    env_height: float = 12.0,
    margin: float = 2.5,
    num_waypoints: int = 64,
) -> np.ndarray:
    """Waypoints of a rounded-rectangle loop inside the default scene.

    Dense superellipse sampling keeps per-step heading changes small enough
    for incremental registration while staying clear of the obstacles.
    """
    a = env_width / 2.0 - margin
    b = env_height / 2.0 - margin
    t = 2.0 * np.pi * np.arange(num_waypoints) / num_waypoints
    # superellipse exponent 4: straight-ish sides, rounded corners
    x = a * np.sign(np.cos(t)) * np.abs(np.cos(t)) ** 0.5
    y = b * np.sign(np.sin(t)) * np.abs(np.sin(t)) ** 0.5
    return np.stack([x, y], axis=1)


def raycast(env: Environment, origin: np.ndarray, direction: np.ndarray, max_range: float):
    """Smallest positive distance along the ray to any wall segment.

    Returns None when nothing is hit within max_range. `direction` must be
    a unit vector.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    p0 = env.segments[:, 0]
    e = env.segments[:, 1] - p0
    # solve origin + t*dir = p0 + u*e for each segment
    denom = direction[0] * e[:, 1] - direction[1] * e[:, 0]
    rel = p0 - origin
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rel[:, 0] * e[:, 1] - rel[:, 1] * e[:, 0]) / denom
        u = (rel[:, 0] * direction[1] - rel[:, 1] * direction[0]) / denom
    valid = (np.abs(denom) > 1e-15) & (t > 1e-12) & (u >= 0.0) & (u <= 1.0)
    if not np.any(valid):
        return None
    t_min = float(t[valid].min())
    return t_min if t_min <= max_range else None


def _raycast_all(env: Environment, origin: np.ndarray, directions: np.ndarray, max_range: float):
    """Vectorized raycast over many unit directions; NaN where no hit."""
    p0 = env.segments[:, 0]
    e = env.segments[:, 1] - p0
    rel = p0 - origin  # (M, 2)
    dx, dy = directions[:, 0:1], directions[:, 1:2]  # (B, 1)
    denom = dx * e[None, :, 1] - dy * e[None, :, 0]  # (B, M)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rel[None, :, 0] * e[None, :, 1] - rel[None, :, 1] * e[None, :, 0]) / denom
        u = (rel[None, :, 0] * dy - rel[None, :, 1] * dx) / denom
    valid = (np.abs(denom) > 1e-15) & (t > 1e-12) & (u >= 0.0) & (u <= 1.0)
    t = np.where(valid, t, np.inf)
    best = t.min(axis=1)
    return np.where(best <= max_range, best, np.nan)


def simulate_scan(env: Environment, pose: Pose, cfg: ScanConfig, frame_index: int) -> PointCloud:
    """One noisy scan from `pose`, expressed in the sensor's local frame."""
    angles = pose.theta + cfg.fov * (np.arange(cfg.num_beams) / cfg.num_beams) - cfg.fov / 2.0
    directions = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    ranges = _raycast_all(env, pose.translation, directions, cfg.max_range)
    rng = keyed_rng(cfg.seed, STREAM_SCAN, frame_index)
    noise = rng.normal(0.0, 1.0, size=cfg.num_beams) * cfg.range_noise_sigma
    hit = ~np.isnan(ranges)
    if hit.sum() < cfg.min_points:
        raise DegenerateScanError(
            f"frame {frame_index}: only {int(hit.sum())} beams hit (< {cfg.min_points})"
        )
    noisy = ranges[hit] + noise[hit]
    # local beam angles: world angle minus heading
    local = angles[hit] - pose.theta
    pts = noisy[:, None] * np.stack([np.cos(local), np.sin(local)], axis=1)
    return PointCloud(pts)


def generate_dataset(env: Environment, trajectory, cfg: ScanConfig) -> Dataset:
    """Scan the environment from every trajectory pose.

    Deterministic for a fixed cfg.seed. Raises DegenerateScanError when any
    viewpoint sees fewer than cfg.min_points walls.
    """
    if len(trajectory) < 2:
        raise ValueError("trajectory must have at least 2 poses")
    for p in trajectory:
        if p.dimension != geometry.SE2:
            raise ValueError("trajectory poses must be SE2")
    clouds = [simulate_scan(env, p, cfg, i) for i, p in enumerate(trajectory)]
    return Dataset(clouds=clouds, gt_poses=list(trajectory))


# ---------------------------------------------------------------------------
# dataset directory layout:
#   meta.txt              key=value: dimension, K, version
#   scans/scan_00000.csv  one "x,y" row per point
#   gt_poses.csv          pose rows (geometry CSV format)
#   init_poses.csv        optional, same format


def save_dataset(dataset: Dataset, path: str) -> None:
    os.makedirs(os.path.join(path, "scans"), exist_ok=True)
    with open(os.path.join(path, "meta.txt"), "w") as f:
        f.write("dimension=SE2\n")
        f.write(f"K={len(dataset)}\n")
        f.write(f"version={DATASET_VERSION}\n")
    for i, cloud in enumerate(dataset.clouds):
        rows = "\n".join(",".join(repr(float(v)) for v in p) for p in cloud.points)
        with open(os.path.join(path, "scans", f"scan_{i:05d}.csv"), "w") as f:
            f.write(rows + "\n")
    geometry.save_poses(os.path.join(path, "gt_poses.csv"), dataset.gt_poses)
    if dataset.init_poses is not None:
        geometry.save_poses(os.path.join(path, "init_poses.csv"), dataset.init_poses)


def load_dataset(path: str) -> Dataset:
    meta = {}
    with open(os.path.join(path, "meta.txt")) as f:
        for line in f:
            if "=" in line:
                key, val = line.strip().split("=", 1)
                meta[key] = val
    k = int(meta["K"])
    clouds = []
    for i in range(k):
        pts = np.loadtxt(os.path.join(path, "scans", f"scan_{i:05d}.csv"), delimiter=",", ndmin=2)
        clouds.append(PointCloud(pts))
    gt = geometry.load_poses(os.path.join(path, "gt_poses.csv"))
    init_path = os.path.join(path, "init_poses.csv")
    init = geometry.load_poses(init_path) if os.path.exists(init_path) else None
    return Dataset(clouds=clouds, gt_poses=gt, init_poses=init)

"""Trajectory evaluation: rigid alignment and absolute trajectory error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import (
    SE2,
    SE3,
    Pose,
    compose,
    matrix_to_quat,
    quat_conjugate,
    quat_multiply,
    quat_rotation_angle,
    wrap_angle,
)


@dataclass
class AteReport:
    t_ate: float  # translation RMSE, meters
    r_ate: float  # rotation RMSE, degrees
    alignment: Pose


def align_trajectories(est, gt) -> Pose:
    """Least-squares rigid (no scale) alignment of est translations onto gt.

    Closed form: cross-covariance of the centered translation sets gives
    the rotation (atan2 in 2D, SVD with a determinant fix in 3D), then the
    translation matches the centroids. Raises on trajectories whose
    translations are all identical.
    """
    if len(est) != len(gt):
        raise ValueError("trajectory length mismatch")
    if len(est) < 2:
        raise ValueError("alignment needs at least 2 poses")
    dim = est[0].dimension
    if any(p.dimension != dim for p in est) or any(p.dimension != dim for p in gt):
        raise ValueError("mixed pose dimensions")
    e = np.stack([p.translation for p in est])
    g = np.stack([p.translation for p in gt])
    if np.allclose(e, e[0], atol=0.0):
        raise ValueError("degenerate trajectory: all estimated translations identical")
    ec = e - e.mean(axis=0)
    gc = g - g.mean(axis=0)
    if dim == SE2:
        num = float(np.sum(ec[:, 0] * gc[:, 1] - ec[:, 1] * gc[:, 0]))
        den = float(np.sum(ec[:, 0] * gc[:, 0] + ec[:, 1] * gc[:, 1]))
        theta = float(np.arctan2(num, den))
        c, s = np.cos(theta), np.sin(theta)
        r = np.array([[c, -s], [s, c]])
        t = g.mean(axis=0) - r @ e.mean(axis=0)
        return Pose.se2(t[0], t[1], theta)
    h = ec.T @ gc
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = g.mean(axis=0) - r @ e.mean(axis=0)
    return Pose.se3(t, matrix_to_quat(r))


def ate(est, gt) -> AteReport:
    """RMSE translation and rotation error after rigid alignment."""
    if len(est) != len(gt):
        raise ValueError("trajectory length mismatch")
    g = align_trajectories(est, gt)
    aligned = [compose(g, p) for p in est]
    t_sq = 0.0
    r_sq = 0.0
    for a, ref in zip(aligned, gt):
        t_sq += float(np.sum((a.translation - ref.translation) ** 2))
        if a.dimension == SE2:
            ang = wrap_angle(a.theta - ref.theta)
        else:
            ang = quat_rotation_angle(quat_multiply(a.rotation, quat_conjugate(ref.rotation)))
        r_sq += ang * ang
    n = len(est)
    return AteReport(
        t_ate=float(np.sqrt(t_sq / n)),
        r_ate=float(np.degrees(np.sqrt(r_sq / n))),
        alignment=g,
    )


def write_ate_csv(path: str, rows) -> None:
    """rows: iterable of (method, AteReport)."""
    with open(path, "w") as f:
        f.write("method,t_ate_m,r_ate_deg\n")
        for method, rep in rows:
            f.write(f"{method},{repr(float(rep.t_ate))},{repr(float(rep.r_ate))}\n")

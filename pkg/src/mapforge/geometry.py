"""Rigid-body pose algebra for SE(2) and SE(3), and point-cloud transforms.

SE(2) poses are stored as (tx, ty, theta) with theta normalized to (-pi, pi];
SE(3) poses as a translation plus a unit quaternion (w, x, y, z). SE(2) is the
optimized representation; SE(3) exists for trajectory ingestion and evaluation.
All arithmetic is float64: downstream gradient checks depend on it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi

SE2 = "SE2"
SE3 = "SE3"


def wrap_angle(theta: float) -> float:
    """Normalize an angle to (-pi, pi]. Exact for exact multiples of 2*pi."""
    t = theta - TWO_PI * np.round(theta / TWO_PI)
    if t <= -np.pi:
        t += TWO_PI
    elif t > np.pi:
        t -= TWO_PI
    return float(t)


def rotation_matrix_2d(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]], dtype=np.float64)


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z), used by the SE3 path only


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dtype=np.float64,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=np.float64)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w >= 0 convention)."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_rotation_angle(q: np.ndarray) -> float:
    """Geodesic rotation angle (radians) of a unit quaternion, in [0, pi]."""
    w = min(1.0, abs(float(q[0])))
    return 2.0 * float(np.arccos(w))


# ---------------------------------------------------------------------------


@dataclass
class Pose:
    """A rigid transform: SE2 (tx, ty, theta) or SE3 (translation, quaternion)."""

    dimension: str
    translation: np.ndarray
    rotation: object  # float theta for SE2, (4,) quaternion for SE3

    def __post_init__(self) -> None:
        self.translation = np.asarray(self.translation, dtype=np.float64).copy()
        if self.dimension == SE2:
            if self.translation.shape != (2,):
                raise ValueError(f"SE2 translation must be length 2, got {self.translation.shape}")
            self.rotation = wrap_angle(float(self.rotation))
        elif self.dimension == SE3:
            if self.translation.shape != (3,):
                raise ValueError(f"SE3 translation must be length 3, got {self.translation.shape}")
            self.rotation = quat_normalize(np.asarray(self.rotation, dtype=np.float64))
        else:
            raise ValueError(f"unknown pose dimension {self.dimension!r}")
        if not np.all(np.isfinite(self.translation)):
            raise ValueError("non-finite translation")

    @classmethod
    def se2(cls, tx: float, ty: float, theta: float) -> "Pose":
        return cls(SE2, np.array([tx, ty], dtype=np.float64), theta)

    @classmethod
    def se3(cls, translation, quaternion) -> "Pose":
        return cls(SE3, translation, quaternion)

    @classmethod
    def identity(cls, dimension: str = SE2) -> "Pose":
        if dimension == SE2:
            return cls.se2(0.0, 0.0, 0.0)
        return cls.se3(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @property
    def theta(self) -> float:
        if self.dimension != SE2:
            raise ValueError("theta is only defined for SE2 poses")
        return float(self.rotation)

    @property
    def quaternion(self) -> np.ndarray:
        if self.dimension != SE3:
            raise ValueError("quaternion is only defined for SE3 poses")
        return self.rotation

    def rotation_matrix(self) -> np.ndarray:
        if self.dimension == SE2:
            return rotation_matrix_2d(self.theta)
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        """Homogeneous matrix, 3x3 for SE2 and 4x4 for SE3."""
        d = 2 if self.dimension == SE2 else 3
        m = np.eye(d + 1, dtype=np.float64)
        m[:d, :d] = self.rotation_matrix()
        m[:d, d] = self.translation
        return m

    def params(self) -> np.ndarray:
        """SE2 only: the (tx, ty, theta) parameter vector."""
        return np.array([self.translation[0], self.translation[1], self.theta])


@dataclass
class PointCloud:
    """One scan: points in the local sensor frame plus the sensor origin."""

    points: np.ndarray
    sensor_origin: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] not in (2, 3):
            raise ValueError(f"points must be (N, 2) or (N, 3), got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("non-finite point coordinates")
        if self.sensor_origin is None:
            self.sensor_origin = np.zeros(self.points.shape[1], dtype=np.float64)
        else:
            self.sensor_origin = np.asarray(self.sensor_origin, dtype=np.float64).copy()
        if self.sensor_origin.shape != (self.points.shape[1],):
            raise ValueError("sensor_origin dimension does not match points")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def _check_same_dimension(a: Pose, b: Pose) -> None:
    if a.dimension != b.dimension:
        raise ValueError(f"pose dimension mismatch: {a.dimension} vs {b.dimension}")


def compose(a: Pose, b: Pose) -> Pose:
    """Pose of the homogeneous product M(a) @ M(b)."""
    _check_same_dimension(a, b)
    if a.dimension == SE2:
        t = a.translation + rotation_matrix_2d(a.theta) @ b.translation
        return Pose.se2(t[0], t[1], a.theta + b.theta)
    t = a.translation + quat_to_matrix(a.rotation) @ b.translation
    return Pose.se3(t, quat_multiply(a.rotation, b.rotation))


def inverse(t: Pose) -> Pose:
    """Pose such that compose(t, inverse(t)) is the identity."""
    if t.dimension == SE2:
        r = rotation_matrix_2d(t.theta)
        ti = -(r.T @ t.translation)
        return Pose.se2(ti[0], ti[1], -t.theta)
    qc = quat_conjugate(t.rotation)
    ti = -(quat_to_matrix(qc) @ t.translation)
    return Pose.se3(ti, qc)


def relative(frm: Pose, to: Pose) -> Pose:
    """Transform r with compose(frm, r) == to, i.e. frm^-1 * to."""
    _check_same_dimension(frm, to)
    return compose(inverse(frm), to)


def transform_cloud(t: Pose, s: PointCloud) -> PointCloud:
    """Apply R @ p + translation to every point and to the sensor origin."""
    d = 2 if t.dimension == SE2 else 3
    if s.dim != d:
        raise ValueError(f"pose is {t.dimension} but cloud is {s.dim}-dimensional")
    r = t.rotation_matrix()
    pts = s.points @ r.T + t.translation
    origin = r @ s.sensor_origin + t.translation
    return PointCloud(pts, origin)


def transform_points(t: Pose, points: np.ndarray) -> np.ndarray:
    """Bare-array variant of transform_cloud for hot paths."""
    return points @ t.rotation_matrix().T + t.translation


# ---------------------------------------------------------------------------
# text serialization: SE2 "tx,ty,theta", SE3 "tx,ty,tz,qw,qx,qy,qz"


def pose_to_row(p: Pose) -> str:
    if p.dimension == SE2:
        vals = [p.translation[0], p.translation[1], p.theta]
    else:
        vals = list(p.translation) + list(p.rotation)
    return ",".join(repr(float(v)) for v in vals)


def pose_from_row(row: str) -> Pose:
    vals = [float(v) for v in row.strip().split(",")]
    if len(vals) == 3:
        return Pose.se2(vals[0], vals[1], vals[2])
    if len(vals) == 7:
        return Pose.se3(np.array(vals[:3]), np.array(vals[3:]))
    raise ValueError(f"pose row must have 3 or 7 fields, got {len(vals)}")


def save_poses(path, poses) -> None:
    with open(path, "w") as f:
        for p in poses:
            f.write(pose_to_row(p) + "\n")


def load_poses(path) -> list:
    poses = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                poses.append(pose_from_row(line))
    return poses

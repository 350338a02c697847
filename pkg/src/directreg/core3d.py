"""Exact 3D math: quaternions, SE(3) transforms, Kabsch alignment, Chamfer distance.

Quaternions are numpy arrays ordered (w, x, y, z). Rigid transforms map a
point ``p`` to ``R @ p + t``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.spatial.distance import cdist

from directreg.errors import DegenerateConfiguration, EmptySet, ZeroQuaternion

_NORMAL_TOL = 1e-6
_QUAT_TOL = 1e-9
# Relative singular-value floor below which a cross-covariance counts as rank deficient.
_RANK_TOL = 1e-10

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points with optional unit normals, both ``(N, 3)`` float arrays."""

    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise ValueError(f"{len(nrm)} normals for {len(pts)} points")
            if len(nrm) and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > _NORMAL_TOL:
                raise ValueError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, idx) -> "PointCloud":
        normals = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], normals)

    def diameter(self) -> float:
        """Bounding-box diagonal, a cheap stand-in for the scene diameter."""
        if len(self.points) == 0:
            return 0.0
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))


# --------------------------------------------------------------------------- quaternions


def quat_canonicalize(q) -> np.ndarray:
    """Normalize ``q`` and fix the sign so ``q`` and ``-q`` map to the same output.

    The scalar part is made non-negative; when it is exactly zero the first
    nonzero vector component is made positive.
    """
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if not n > 0.0:
        raise ZeroQuaternion("cannot normalize a zero quaternion")
    q = q / n
    if q[0] < 0.0:
        q = -q
    elif q[0] == 0.0:
        nz = np.flatnonzero(q[1:])
        if len(nz) and q[1 + nz[0]] < 0.0:
            q = -q
    return q + 0.0  # drops negative zeros


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quats_to_matrices(q: np.ndarray) -> np.ndarray:
    """Vectorized :func:`quat_to_matrix` for an ``(N, 4)`` array."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    out = np.empty((len(q), 3, 3))
    out[:, 0, 0] = 1 - 2 * (y * y + z * z)
    out[:, 0, 1] = 2 * (x * y - w * z)
    out[:, 0, 2] = 2 * (x * z + w * y)
    out[:, 1, 0] = 2 * (x * y + w * z)
    out[:, 1, 1] = 1 - 2 * (x * x + z * z)
    out[:, 1, 2] = 2 * (y * z - w * x)
    out[:, 2, 0] = 2 * (x * z - w * y)
    out[:, 2, 1] = 2 * (y * z + w * x)
    out[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(m) -> np.ndarray:
    """Rotation matrix to canonical quaternion (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    tr = np.trace(m)
    diag = np.diag(m)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return quat_canonicalize(q)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return quat_canonicalize(np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis]))


def quat_to_rodrigues(q) -> np.ndarray:
    """Axis times angle, with the angle in ``[0, pi]``."""
    q = quat_canonicalize(q)
    vn = np.linalg.norm(q[1:])
    if vn == 0.0:
        return np.zeros(3)
    angle = 2.0 * np.arctan2(vn, q[0])
    return q[1:] / vn * angle


def rodrigues_to_quat(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    angle = np.linalg.norm(r)
    if angle == 0.0:
        return IDENTITY_QUAT.copy()
    return quat_from_axis_angle(r / angle, angle)


def quat_angle(a, b) -> float:
    """Geodesic angle in radians between the rotations of two quaternions."""
    d = abs(float(np.dot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return 2.0 * float(np.arccos(min(1.0, d)))


def rotation_angle(m) -> float:
    """Rotation angle of a 3x3 rotation matrix, in ``[0, pi]``."""
    m = np.asarray(m)
    # The sine/cosine form stays accurate near zero, unlike arccos of the trace.
    skew = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    return float(np.arctan2(0.5 * np.linalg.norm(skew), 0.5 * (np.trace(m) - 1.0)))


def random_quat(rng: np.random.Generator, max_angle: float = np.pi) -> np.ndarray:
    """Random rotation; uniform on SO(3) when ``max_angle == pi``."""
    if max_angle >= np.pi:
        return quat_canonicalize(rng.normal(size=4))
    axis = rng.normal(size=3)
    return quat_from_axis_angle(axis, rng.uniform(0.0, max_angle))


# --------------------------------------------------------------------------- transforms


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation (canonical unit quaternion) plus translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_canonicalize(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(IDENTITY_QUAT, np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        """Build from a 3x3 rotation or 4x4 homogeneous matrix."""
        m = np.asarray(m, dtype=np.float64)
        if m.shape == (4, 4):
            return cls(matrix_to_quat(m[:3, :3]), m[:3, 3])
        return cls(matrix_to_quat(m), np.zeros(3))

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def homogeneous(self) -> np.ndarray:
        h = np.eye(4)
        h[:3, :3] = self.matrix
        h[:3, 3] = self.translation
        return h

    def transform_points(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.matrix.T + self.translation

    def as_vector(self) -> np.ndarray:
        """``(qw, qx, qy, qz, tx, ty, tz)``."""
        return np.concatenate([self.rotation, self.translation])

    @classmethod
    def from_vector(cls, v) -> "RigidTransform":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:4], v[4:7])


def apply_transform(t: RigidTransform, c: PointCloud) -> PointCloud:
    r = t.matrix
    normals = None if c.normals is None else c.normals @ r.T
    if normals is not None:
        # Re-normalize to keep the unit-norm invariant against rounding.
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(c.points @ r.T + t.translation, normals)


def compose_transforms(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying ``b`` first, then ``a``."""
    rot = quat_multiply(a.rotation, b.rotation)
    return RigidTransform(rot, a.matrix @ b.translation + a.translation)


def invert_transform(t: RigidTransform) -> RigidTransform:
    inv_rot = quat_conjugate(t.rotation)
    return RigidTransform(inv_rot, -(quat_to_matrix(inv_rot) @ t.translation))


def transform_error(est: RigidTransform, gt: RigidTransform) -> tuple[float, float]:
    """Rotation error (rad) and translation error (scene units)."""
    return (rotation_angle(est.matrix.T @ gt.matrix),
            float(np.linalg.norm(est.translation - gt.translation)))


def kabsch_align(src, dst) -> RigidTransform:
    """Least-squares rigid transform taking ``src`` onto ``dst``.

    Raises:
        DegenerateConfiguration: fewer than 3 pairs, or the centered
            cross-covariance has rank below 2 (collinear or coincident points).
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError(f"length mismatch: {len(src)} vs {len(dst)}")
    if len(src) < 3:
        raise DegenerateConfiguration(f"need at least 3 point pairs, got {len(src)}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    h = (src - mu_s).T @ (dst - mu_d)
    u, s, vt = np.linalg.svd(h)
    if s[0] <= 0.0 or s[1] <= _RANK_TOL * s[0]:
        raise DegenerateConfiguration("cross-covariance rank < 2 (collinear points)")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0.0:
        d = 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(matrix_to_quat(r), mu_d - r @ mu_s)


# --------------------------------------------------------------------------- chamfer

SetLike = Union[PointCloud, np.ndarray]


def _as_rows(x: SetLike) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    if hasattr(x, "signatures"):
        return np.asarray(x.signatures, dtype=np.float64)
    arr = np.asarray(x, dtype=np.float64)
    return arr.reshape(len(arr), -1) if arr.ndim != 2 else arr


def chamfer_distance(x: SetLike, y: SetLike) -> float:
    """Max of the two directed mean nearest-neighbour (unsquared L2) distances."""
    a = _as_rows(x)
    b = _as_rows(y)
    if len(a) == 0 or len(b) == 0:
        raise EmptySet("chamfer distance of an empty set")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    d = cdist(a, b)
    return float(max(d.min(axis=1).mean(), d.min(axis=0).mean()))

"""Keypoint sampling, local patch extraction, normal estimation and point pair features."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from directreg.core3d import PointCloud
from directreg.errors import EmptyNeighborhood, TooFewPoints

FULL_SCALE_PATCH_RADIUS = 0.30
FULL_SCALE_PATCH_POINTS = 2048
DEFAULT_PATCH_POINTS = 256
# Patch radius as a fraction of the scene diameter for synthetic scenes.
DEFAULT_RADIUS_FRACTION = 0.15


@dataclass(frozen=True, eq=False)
class Keypoint:
    index: int
    position: np.ndarray


@dataclass(frozen=True, eq=False)
class LocalPatch:
    """Neighbourhood of a keypoint in the normalized frame.

    ``points`` are ``(p - center) / radius``, so the reference sits at the
    origin and every neighbour lies in the unit ball.
    """

    points: np.ndarray
    normals: np.ndarray
    ref_normal: np.ndarray
    radius: float
    keypoint_index: int
    center: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class PpfSignatureSet:
    """One ``(alpha1, alpha2, alpha3, delta)`` row per patch neighbour."""

    signatures: np.ndarray

    def __len__(self) -> int:
        return len(self.signatures)


def estimate_normals(c: PointCloud, k: int, viewpoint=(0.0, 0.0, 0.0)) -> PointCloud:
    """PCA normals from the ``k`` nearest neighbours, oriented toward ``viewpoint``."""
    n = len(c)
    if k < 3 or n <= k:
        raise TooFewPoints(f"need more than k={k} >= 3 points, got {n}")
    pts = c.points
    _, idx = cKDTree(pts).query(pts, k=k)
    nbrs = pts[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    flip = np.einsum("ni,ni->n", normals, np.asarray(viewpoint, dtype=np.float64) - pts) < 0.0
    normals[flip] *= -1.0
    return PointCloud(pts, normals)


def sample_keypoints(c: PointCloud, voxel: float) -> list[Keypoint]:
    """One keypoint per occupied voxel: the point closest to the voxel centroid.

    Keypoints are ordered by the first appearance of their voxel in ``c``;
    distance ties go to the lower point index.
    """
    if not voxel > 0:
        raise ValueError("voxel edge must be positive")
    pts = c.points
    if len(pts) == 0:
        return []
    keys = np.floor(pts / voxel).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    n_vox = len(first)
    sums = np.zeros((n_vox, 3))
    np.add.at(sums, inverse, pts)
    counts = np.bincount(inverse, minlength=n_vox)
    centroids = sums / counts[:, None]
    dist = np.linalg.norm(pts - centroids[inverse], axis=1)
    order = np.lexsort((np.arange(len(pts)), dist, inverse))
    is_first = np.ones(len(order), dtype=bool)
    is_first[1:] = inverse[order][1:] != inverse[order][:-1]
    chosen = order[is_first]  # one per voxel, sorted by voxel id
    voxel_order = np.argsort(first, kind="stable")
    return [Keypoint(int(chosen[v]), pts[chosen[v]].copy()) for v in voxel_order]


def keypoint_positions(keypoints: Sequence[Keypoint]) -> np.ndarray:
    return np.array([kp.position for kp in keypoints], dtype=np.float64).reshape(-1, 3)


def _neighbors(c: PointCloud, center: np.ndarray, r: float, tree: Optional[cKDTree]) -> np.ndarray:
    if tree is None:
        d = np.linalg.norm(c.points - center, axis=1)
        return np.flatnonzero(d <= r)
    return np.sort(np.asarray(tree.query_ball_point(center, r), dtype=np.int64))


def extract_patch(c: PointCloud, k: Keypoint, r: float, n_patch: int, seed,
                  tree: Optional[cKDTree] = None) -> LocalPatch:
    """Sample ``n_patch`` in-radius points around ``k`` and normalize them.

    Sampling is without replacement when enough neighbours exist, with
    replacement otherwise. ``seed`` is anything ``np.random.default_rng`` takes.
    """
    if c.normals is None:
        raise ValueError("patch extraction needs a cloud with normals")
    center = np.asarray(k.position, dtype=np.float64)
    nb = _neighbors(c, center, r, tree)
    if len(nb) == 0:
        raise EmptyNeighborhood(f"no points within r={r} of keypoint {k.index}")
    rng = np.random.default_rng(seed)
    pick = rng.choice(nb, size=n_patch, replace=len(nb) < n_patch)
    return LocalPatch(
        points=(c.points[pick] - center) / r,
        normals=c.normals[pick].copy(),
        ref_normal=c.normals[k.index].copy(),
        radius=float(r),
        keypoint_index=int(k.index),
        center=center.copy(),
    )


def extract_patches(c: PointCloud, keypoints: Sequence[Keypoint], r: float, n_patch: int,
                    seed: int = 0) -> list[LocalPatch]:
    """Patches for many keypoints; each keypoint gets its own ``(seed, index)`` stream."""
    tree = cKDTree(c.points)
    return [extract_patch(c, kp, r, n_patch, (seed, kp.index), tree) for kp in keypoints]


def _angle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), np.einsum("...i,...i->...", a, b))


def ppf_batch(p1, n1, p2, n2) -> np.ndarray:
    """Vectorized point pair features; broadcasting over leading axes."""
    p1, n1, p2, n2 = (np.asarray(v, dtype=np.float64) for v in (p1, n1, p2, n2))
    d = p2 - p1
    dist = np.linalg.norm(d, axis=-1)
    a1 = _angle(n1, d)
    a2 = _angle(n2, d)
    a3 = _angle(n1, n2)
    # atan2(0, 0) is already 0, but make the zero-offset convention explicit.
    zero = dist == 0.0
    a1 = np.where(zero, 0.0, a1)
    a2 = np.where(zero, 0.0, a2)
    a3 = np.broadcast_to(a3, dist.shape)
    return np.stack([a1, a2, a3, dist], axis=-1)


def compute_ppf(p1, n1, p2, n2) -> tuple[float, float, float, float]:
    """``(angle(n1, d), angle(n2, d), angle(n1, n2), |d|)`` with ``d = p2 - p1``."""
    return tuple(float(v) for v in ppf_batch(p1, n1, p2, n2))


def encode_patch_ppfs(p: LocalPatch) -> PpfSignatureSet:
    """Pair the reference (origin, reference normal) with every neighbour, in order."""
    origin = np.zeros(3)
    return PpfSignatureSet(ppf_batch(origin, p.ref_normal, p.points, p.normals))

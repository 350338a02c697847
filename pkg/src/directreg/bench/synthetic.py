"""Synthetic fragment pairs carved from composite primitive scenes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from directreg.core3d import PointCloud, RigidTransform, invert_transform, random_quat
from directreg.errors import InvalidSpec


@dataclass(frozen=True)
class SceneSpec:
    """Composite scene: floor, two walls and a few boxes, spheres and cylinders.

    ``n_points`` is the size of the dense master sampling; each fragment keeps
    an independent ``keep`` fraction of the master points in its region.
    """

    extent: float = 1.0
    n_boxes: int = 3
    n_spheres: int = 2
    n_cylinders: int = 2
    walls: bool = True
    n_points: int = 3000
    keep: float = 0.8
    max_rotation: float = np.pi / 3
    max_translation: float = 0.5

    def validate(self) -> None:
        if not self.extent > 0:
            raise InvalidSpec("extent must be positive")
        if min(self.n_boxes, self.n_spheres, self.n_cylinders) < 0:
            raise InvalidSpec("primitive counts must be non-negative")
        if self.n_points < 10:
            raise InvalidSpec("n_points must be at least 10")
        if not 0.0 < self.keep <= 1.0:
            raise InvalidSpec("keep must be in (0, 1]")
        if not 0.0 <= self.max_rotation <= np.pi:
            raise InvalidSpec("max_rotation must be in [0, pi]")
        if self.max_translation < 0:
            raise InvalidSpec("max_translation must be non-negative")


@dataclass(frozen=True, eq=False)
class FragmentPair:
    """Two views; ``gt_transform`` maps ``cloud_b`` coordinates into ``cloud_a``'s frame."""

    cloud_a: PointCloud
    cloud_b: PointCloud
    gt_transform: RigidTransform
    overlap: float
    sigma: float
    pair_id: str


# --------------------------------------------------------------------------- primitives


class _Patch:
    """A sampleable surface piece with analytic outward normals."""

    area: float

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


class _Rect(_Patch):
    def __init__(self, origin, u, v):
        self.origin = np.asarray(origin, float)
        self.u = np.asarray(u, float)
        self.v = np.asarray(v, float)
        n = np.cross(self.u, self.v)
        self.area = float(np.linalg.norm(n))
        self.normal = n / self.area

    def sample(self, n, rng):
        a, b = rng.random((2, n))
        pts = self.origin + a[:, None] * self.u + b[:, None] * self.v
        return pts, np.broadcast_to(self.normal, pts.shape).copy()


class _Sphere(_Patch):
    def __init__(self, center, radius):
        self.center = np.asarray(center, float)
        self.radius = float(radius)
        self.area = 4.0 * np.pi * radius ** 2

    def sample(self, n, rng):
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return self.center + self.radius * d, d


class _CylinderSide(_Patch):
    def __init__(self, base, radius, height):
        self.base = np.asarray(base, float)
        self.radius = float(radius)
        self.height = float(height)
        self.area = 2.0 * np.pi * radius * height

    def sample(self, n, rng):
        phi = rng.uniform(0.0, 2 * np.pi, n)
        h = rng.uniform(0.0, self.height, n)
        nrm = np.stack([np.cos(phi), np.sin(phi), np.zeros(n)], axis=1)
        pts = self.base + self.radius * nrm
        pts[:, 2] += h
        return pts, nrm


class _Disk(_Patch):
    def __init__(self, center, radius):
        self.center = np.asarray(center, float)
        self.radius = float(radius)
        self.area = np.pi * radius ** 2

    def sample(self, n, rng):
        rad = self.radius * np.sqrt(rng.random(n))
        phi = rng.uniform(0.0, 2 * np.pi, n)
        pts = self.center + np.stack([rad * np.cos(phi), rad * np.sin(phi), np.zeros(n)], axis=1)
        nrm = np.zeros((n, 3))
        nrm[:, 2] = 1.0
        return pts, nrm


def _box_faces(center_xy, size, yaw) -> list[_Patch]:
    sx, sy, sz = size
    c, s = np.cos(yaw), np.sin(yaw)
    ex = np.array([c, s, 0.0]) * sx
    ey = np.array([-s, c, 0.0]) * sy
    ez = np.array([0.0, 0.0, sz])
    o = np.array([center_xy[0], center_xy[1], 0.0]) - 0.5 * ex - 0.5 * ey
    # Bottom face omitted; every face normal points outward (right-handed u x v).
    return [
        _Rect(o + ez, ex, ey),  # top
        _Rect(o, ez, ey),       # -x side
        _Rect(o + ex, ey, ez),  # +x side
        _Rect(o, ex, ez),       # -y side
        _Rect(o + ey, ez, ex),  # +y side
    ]


def build_scene(spec: SceneSpec, rng: np.random.Generator) -> list[_Patch]:
    e = spec.extent
    parts: list[_Patch] = [_Rect([-e, -e, 0.0], [2 * e, 0, 0], [0, 2 * e, 0])]
    if spec.walls:
        h = 0.8 * e
        parts.append(_Rect([-e, -e, 0.0], [0, 2 * e, 0], [0, 0, h]))   # x = -e, normal +x
        parts.append(_Rect([-e, -e, 0.0], [0, 0, h], [2 * e, 0, 0]))   # y = -e, normal +y
    for _ in range(spec.n_boxes):
        size = rng.uniform([0.15, 0.15, 0.1], [0.5, 0.5, 0.6]) * e
        xy = rng.uniform(-0.7, 0.7, 2) * e
        parts.extend(_box_faces(xy, size, rng.uniform(0, np.pi)))
    for _ in range(spec.n_spheres):
        r = rng.uniform(0.08, 0.2) * e
        xy = rng.uniform(-0.75, 0.75, 2) * e
        parts.append(_Sphere([xy[0], xy[1], r], r))
    for _ in range(spec.n_cylinders):
        r = rng.uniform(0.06, 0.18) * e
        h = rng.uniform(0.2, 0.7) * e
        xy = rng.uniform(-0.75, 0.75, 2) * e
        parts.append(_CylinderSide([xy[0], xy[1], 0.0], r, h))
        parts.append(_Disk([xy[0], xy[1], h], r))
    return parts


def sample_scene(parts: list[_Patch], n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted surface sample of ``n`` points with outward normals."""
    areas = np.array([p.area for p in parts])
    counts = rng.multinomial(n, areas / areas.sum())
    pts, nrm = [], []
    for part, k in zip(parts, counts):
        if k:
            p, q = part.sample(int(k), rng)
            pts.append(p)
            nrm.append(q)
    return np.concatenate(pts), np.concatenate(nrm)


# --------------------------------------------------------------------------- pairs


def fragment_share(overlap: float) -> float:
    """Fraction of the scene each fragment covers so that |a ∩ b| / |b| = overlap."""
    return 1.0 / (2.0 - overlap)


def generate_synthetic_pair(spec: SceneSpec, overlap: float, sigma: float, seed: int,
                            pair_id: Optional[str] = None) -> FragmentPair:
    """Carve two overlapping views of a random scene and move view b rigidly.

    The master sampling is ranked along a random horizontal sweep direction;
    view a takes the lowest ranks and view b the highest, with equal shares
    chosen so the overlapping band is ``overlap`` of view b. Each view then
    keeps an independent ``spec.keep`` subsample and gets isotropic Gaussian
    noise ``sigma``.
    """
    spec.validate()
    if not 0.0 < overlap <= 1.0:
        raise InvalidSpec("overlap must be in (0, 1]")
    if sigma < 0:
        raise InvalidSpec("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    parts = build_scene(spec, rng)
    pts, nrm = sample_scene(parts, spec.n_points, rng)

    phi = rng.uniform(0, 2 * np.pi)
    sweep = np.array([np.cos(phi), np.sin(phi), 0.0])
    rank = np.empty(len(pts))
    rank[np.argsort(pts @ sweep, kind="stable")] = (np.arange(len(pts)) + 0.5) / len(pts)
    share = fragment_share(overlap)
    in_a = rank < share
    in_b = rank > 1.0 - share
    if overlap == 1.0:
        in_a[:] = True
        in_b[:] = True

    def carve(mask):
        idx = np.flatnonzero(mask)
        if spec.keep < 1.0:
            k = max(1, int(round(spec.keep * len(idx))))
            idx = np.sort(rng.choice(idx, k, replace=False))
        return idx

    ia = carve(in_a)
    ib = carve(in_b)
    both = in_a & in_b
    measured = float(both[ib].mean()) if len(ib) else 0.0

    pa = pts[ia] + (rng.normal(scale=sigma, size=(len(ia), 3)) if sigma > 0 else 0.0)
    pb = pts[ib] + (rng.normal(scale=sigma, size=(len(ib), 3)) if sigma > 0 else 0.0)
    motion = RigidTransform(random_quat(rng, spec.max_rotation),
                            rng.uniform(-1, 1, 3) * spec.max_translation * spec.extent)
    cloud_b = motion.transform_points(pb)
    normals_b = nrm[ib] @ motion.matrix.T
    normals_b /= np.linalg.norm(normals_b, axis=1, keepdims=True)
    return FragmentPair(
        cloud_a=PointCloud(pa, nrm[ia]),
        cloud_b=PointCloud(cloud_b, normals_b),
        gt_transform=invert_transform(motion),
        overlap=measured,
        sigma=float(sigma),
        pair_id=pair_id if pair_id is not None else f"pair_{seed}",
    )


def measure_overlap(pair: FragmentPair, eps: float) -> float:
    """Fraction of b-points with an a-neighbour within ``2 sigma + eps`` after GT alignment."""
    from scipy.spatial import cKDTree

    b_in_a = pair.gt_transform.transform_points(pair.cloud_b.points)
    d, _ = cKDTree(pair.cloud_a.points).query(b_in_a)
    return float(np.mean(d <= 2.0 * pair.sigma + eps))


@dataclass(frozen=True)
class DatasetSpec:
    """Desk benchmark: train/test splits of synthetic pairs."""

    n_train: int = 50
    n_test: int = 50
    overlap_range: tuple[float, float] = (0.3, 0.8)
    sigma_fraction: float = 0.005
    scene: SceneSpec = SceneSpec()
    seed: int = 0


def generate_dataset(spec: DatasetSpec) -> dict[str, list[FragmentPair]]:
    rng = np.random.default_rng(spec.seed)
    splits: dict[str, list[FragmentPair]] = {"train": [], "test": []}
    diameter = scene_diameter(spec.scene)
    for split, n in (("train", spec.n_train), ("test", spec.n_test)):
        for i in range(n):
            seed = int(rng.integers(2 ** 31))
            overlap = float(rng.uniform(*spec.overlap_range))
            splits[split].append(generate_synthetic_pair(
                spec.scene, overlap, spec.sigma_fraction * diameter, seed, pair_id=f"{split}_{i:03d}"))
    return splits


def scene_diameter(spec: SceneSpec) -> float:
    """Floor diagonal extended by the wall height."""
    return float(np.linalg.norm([2 * spec.extent, 2 * spec.extent, 0.8 * spec.extent]))


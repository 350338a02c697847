import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_transform
from directreg.core3d import PointCloud, RigidTransform, apply_transform
from directreg.errors import EmptyNeighborhood, TooFewPoints
from directreg.patches import (FULL_SCALE_PATCH_POINTS, FULL_SCALE_PATCH_RADIUS, Keypoint, compute_ppf,
                               encode_patch_ppfs, estimate_normals, extract_patch, extract_patches,
                               sample_keypoints)

seeds = st.integers(0, 2 ** 32 - 1)


def unit_rows(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_cloud(rng, n=200):
    return PointCloud(rng.uniform(-1, 1, (n, 3)), unit_rows(rng, n))


def test_plane_normals_face_viewpoint():
    g = np.stack(np.meshgrid(np.linspace(-1, 1, 12), np.linspace(-1, 1, 12)), -1).reshape(-1, 2)
    pts = np.column_stack([g, np.zeros(len(g))])
    up = estimate_normals(PointCloud(pts), 8, viewpoint=(0, 0, 5))
    np.testing.assert_allclose(up.normals, np.tile([0, 0, 1.0], (len(pts), 1)), atol=1e-9)
    down = estimate_normals(PointCloud(pts), 8, viewpoint=(0, 0, -5))
    np.testing.assert_allclose(down.normals[:, 2], -1.0, atol=1e-9)


def test_sphere_normals_are_radial(rng):
    d = unit_rows(rng, 4000)
    # Viewpoint at the centre orients normals inward.
    out = estimate_normals(PointCloud(d), 12, viewpoint=(0, 0, 0))
    cos = np.abs(np.einsum("ij,ij->i", out.normals, d))
    assert np.degrees(np.arccos(np.clip(cos, -1, 1))).max() < 5.0


def test_too_few_points_for_normals():
    with pytest.raises(TooFewPoints):
        estimate_normals(PointCloud([[0.0, 0, 0], [1, 0, 0]]), 3)


def test_single_voxel_single_keypoint(rng):
    c = PointCloud(rng.uniform(0.1, 0.2, (30, 3)))
    assert len(sample_keypoints(c, 1.0)) == 1


def test_cube_corners_each_a_keypoint():
    corners = np.array([[x, y, z] for x in (0, 10) for y in (0, 10) for z in (0, 10)], float)
    kps = sample_keypoints(PointCloud(corners), 0.5)
    assert sorted(k.index for k in kps) == list(range(8))


@given(seeds, st.floats(0.05, 1.0))
def test_keypoint_count_matches_voxel_hash(seed, voxel):
    rng = np.random.default_rng(seed)
    c = PointCloud(rng.uniform(-2, 2, (300, 3)))
    occupied = {tuple(int(math.floor(v / voxel)) for v in p) for p in c.points}
    kps = sample_keypoints(c, voxel)
    assert len(kps) == len(occupied)
    assert {tuple(int(math.floor(v / voxel)) for v in k.position) for k in kps} == occupied
    for k in kps:
        np.testing.assert_array_equal(k.position, c.points[k.index])


def test_full_scale_constants_selectable(rng):
    assert (FULL_SCALE_PATCH_RADIUS, FULL_SCALE_PATCH_POINTS) == (0.30, 2048)
    c = random_cloud(rng, 500)
    p = extract_patch(c, Keypoint(0, c.points[0]), FULL_SCALE_PATCH_RADIUS, FULL_SCALE_PATCH_POINTS, 0)
    assert p.points.shape == (2048, 3)


def test_single_point_cloud_patch():
    c = PointCloud([[1.0, 2, 3]], [[0, 0, 1.0]])
    p = extract_patch(c, Keypoint(0, c.points[0]), 0.5, 16, 0)
    np.testing.assert_array_equal(p.points, np.zeros((16, 3)))


def test_neighbours_on_sphere_normalize_to_unit():
    rng = np.random.default_rng(3)
    d = unit_rows(rng, 50) * 0.7
    c = PointCloud(np.vstack([[0, 0, 0], d]), unit_rows(rng, 51))
    p = extract_patch(c, Keypoint(0, c.points[0]), 0.7 * (1 + 1e-12), 40, 0)
    norms = np.linalg.norm(p.points, axis=1)
    assert np.all(np.abs(norms[norms > 0] - 1.0) < 1e-6)


def test_empty_neighbourhood():
    c = PointCloud([[0.0, 0, 0]], [[0, 0, 1.0]])
    with pytest.raises(EmptyNeighborhood):
        extract_patch(c, Keypoint(0, np.array([5.0, 5, 5])), 0.1, 8, 0)


def test_patch_invariants(rng):
    c = random_cloud(rng, 400)
    for p in extract_patches(c, sample_keypoints(c, 0.5), 0.6, 64, 1):
        assert np.all(np.linalg.norm(p.points, axis=1) <= 1 + 1e-6)
        np.testing.assert_allclose(np.linalg.norm(p.normals, axis=1), 1.0)


def test_translation_cancels_in_patch(rng):
    c = random_cloud(rng, 300)
    shift = RigidTransform.identity().__class__([1, 0, 0, 0], [0.25, -0.5, 0.125])
    moved = apply_transform(shift, c)
    k = sample_keypoints(c, 0.4)[3]
    a = extract_patch(c, k, 0.5, 64, 9)
    b = extract_patch(moved, Keypoint(k.index, moved.points[k.index]), 0.5, 64, 9)
    np.testing.assert_allclose(a.points, b.points, atol=1e-12)


def test_ppf_examples():
    z = (0, 0, 1)
    assert compute_ppf((0, 0, 0), z, (1, 0, 0), z) == pytest.approx((math.pi / 2, math.pi / 2, 0, 1))
    assert compute_ppf((0, 0, 0), z, (1, 0, 0), (1, 0, 0)) == pytest.approx((math.pi / 2, 0, math.pi / 2, 1))


@given(seeds)
def test_ppf_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    p1, p2 = rng.normal(size=(2, 3))
    n1, n2 = unit_rows(rng, 2)
    t = random_transform(rng)
    r = t.matrix
    before = compute_ppf(p1, n1, p2, n2)
    after = compute_ppf(t.transform_points(p1), r @ n1, t.transform_points(p2), r @ n2)
    np.testing.assert_allclose(before, after, atol=1e-9)


def test_zero_offset_signatures(rng):
    n = unit_rows(rng, 5)
    c = PointCloud(np.zeros((5, 3)), n)
    p = extract_patch(c, Keypoint(0, c.points[0]), 1.0, 5, 0)
    sig = encode_patch_ppfs(p).signatures
    theta = np.arccos(np.clip(p.normals @ n[0], -1, 1))
    np.testing.assert_allclose(sig[:, [0, 1, 3]], 0.0)
    np.testing.assert_allclose(sig[:, 2], theta, atol=1e-7)


def test_signature_count_and_ranges(rng):
    c = random_cloud(rng, 500)
    for p in extract_patches(c, sample_keypoints(c, 0.7), 0.8, 256, 0):
        sig = encode_patch_ppfs(p).signatures
        assert sig.shape == (256, 4)
        assert np.all((sig[:, :3] >= 0) & (sig[:, :3] <= math.pi))
        assert np.all((sig[:, 3] >= 0) & (sig[:, 3] <= 2))


@given(seeds)
def test_encoded_patch_invariance(seed):
    rng = np.random.default_rng(seed)
    c = random_cloud(rng, 300)
    t = random_transform(rng, scale=3.0)
    moved = apply_transform(t, c)
    k = sample_keypoints(c, 0.5)[0]
    a = extract_patch(c, k, 0.6, 128, seed)
    b = extract_patch(moved, Keypoint(k.index, moved.points[k.index]), 0.6, 128, seed)
    np.testing.assert_allclose(encode_patch_ppfs(a).signatures, encode_patch_ppfs(b).signatures, atol=1e-6)

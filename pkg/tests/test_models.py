import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_transform
from directreg.core3d import PointCloud, apply_transform
from directreg.errors import ShapeMismatch, VariantMismatch
from directreg.models import (LatentDescriptor, ModelConfig, PoseModels, decode_fold, encode,
                              pose_feature, relative_pose_forward, PoseFeature)
from directreg.patches import Keypoint, extract_patch, sample_keypoints
from directreg.tensornet import finite_difference_check, load_checkpoint, save_checkpoint
from directreg.training import pose_loss

SMALL = ModelConfig(latent_dim=16, n_patch=64, point_widths=(16, 32), fold_widths=(16, 16),
                    relative_widths=(32, 16, 8))


@pytest.fixture(scope="module")
def models():
    return PoseModels.build(SMALL)


def cloud(rng, n=300):
    nrm = rng.normal(size=(n, 3))
    return PointCloud(rng.uniform(-1, 1, (n, 3)), nrm / np.linalg.norm(nrm, axis=1, keepdims=True))


def patch_pair(seed):
    rng = np.random.default_rng(seed)
    c = cloud(rng)
    t = random_transform(rng, scale=2.0)
    moved = apply_transform(t, c)
    k = sample_keypoints(c, 0.5)[0]
    a = extract_patch(c, k, 0.7, SMALL.n_patch, seed)
    b = extract_patch(moved, Keypoint(k.index, moved.points[k.index]), 0.7, SMALL.n_patch, seed)
    return a, b


@given(st.integers(0, 10_000))
def test_ppf_latent_invariant_to_rigid_motion(models, seed):
    a, b = patch_pair(seed)
    np.testing.assert_allclose(encode(models.ppf, a).vector, encode(models.ppf, b).vector, atol=1e-6)


def test_pc_latent_changes_under_rotation(models):
    a, b = patch_pair(3)
    assert np.linalg.norm(encode(models.pc, a).vector - encode(models.pc, b).vector) > 0


def test_pose_features_differ_only_through_pc_latent(models):
    a, b = patch_pair(4)
    fa = pose_feature(encode(models.pc, a), encode(models.ppf, a)).vector
    fb = pose_feature(encode(models.pc, b), encode(models.ppf, b)).vector
    np.testing.assert_allclose(fa - fb, encode(models.pc, a).vector - encode(models.pc, b).vector, atol=1e-6)


def test_zero_weight_model_gives_zero_latent():
    m = PoseModels.build(SMALL)
    for k in m.store.keys():
        m.store[k] = np.zeros_like(m.store[k])
    a, _ = patch_pair(0)
    np.testing.assert_array_equal(encode(m.pc, a).vector, 0.0)


def test_decoder_shapes(models):
    z = LatentDescriptor(np.ones(SMALL.latent_dim), "pc")
    assert decode_fold(models.pc, z).shape == (64, 3)
    assert decode_fold(models.ppf, z).shape == (64, 4)
    default_model = PoseModels.build(ModelConfig(n_patch=256))
    assert default_model.pc.decode_fold(np.zeros(64)).shape == (256, 3)
    assert default_model.ppf.decode_fold(np.zeros(64)).shape == (256, 4)


def test_decoder_deterministic(models):
    z = np.random.default_rng(0).normal(size=SMALL.latent_dim)
    assert np.array_equal(models.pc.decode_fold(z), models.pc.decode_fold(z))


def test_pose_feature_examples():
    f = pose_feature(LatentDescriptor(np.array([1.0, 2.0]), "pc"), LatentDescriptor(np.array([0.5, 0.5]), "ppf"))
    np.testing.assert_array_equal(f.vector, [0.5, 1.5])
    same = np.arange(3.0)
    np.testing.assert_array_equal(
        pose_feature(LatentDescriptor(same, "pc"), LatentDescriptor(same, "ppf")).vector, 0.0)
    with pytest.raises(VariantMismatch):
        pose_feature(LatentDescriptor(same, "ppf"), LatentDescriptor(same, "pc"))
    with pytest.raises(ShapeMismatch):
        pose_feature(LatentDescriptor(same, "pc"), LatentDescriptor(same[:2], "ppf"))


def test_relative_output_is_canonical_unit(models):
    rng = np.random.default_rng(2)
    f1, f2 = rng.normal(size=(2, 50, SMALL.latent_dim))
    q, _ = models.relative.forward_batch(f1, f2)
    np.testing.assert_allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-9)
    assert np.all(q[:, 0] >= 0)
    q_swapped, _ = models.relative.forward_batch(f2, f1)
    np.testing.assert_allclose(np.linalg.norm(q_swapped, axis=1), 1.0, atol=1e-9)


def test_zero_last_layer_with_identity_bias():
    m = PoseModels.build(SMALL)
    m.store["rel.3.W"] = np.zeros_like(m.store["rel.3.W"])
    m.store["rel.3.b"] = np.array([1.0, 0, 0, 0])
    rng = np.random.default_rng(0)
    q = relative_pose_forward(m.relative, PoseFeature(rng.normal(size=16)), PoseFeature(rng.normal(size=16)))
    np.testing.assert_array_equal(q, [1, 0, 0, 0])


def test_relative_has_four_layers(models):
    assert len(models.relative.spec.widths) == 4
    with pytest.raises(ValueError):
        PoseModels(ModelConfig(relative_widths=(8, 8)))


def test_pose_loss_gradient_through_relative_net(models):
    rng = np.random.default_rng(5)
    f1, f2 = rng.normal(size=(2, 1, SMALL.latent_dim))
    q_gt = np.array([[0.8, 0.2, -0.4, 0.4]])
    q_gt /= np.linalg.norm(q_gt)
    net = models.relative

    def loss(p):
        q, tape = net.forward_batch(f1, f2, p)
        diff = q - q_gt
        n = np.linalg.norm(diff)
        grads, _, _ = net.backward(tape, diff / n)
        return float(n), grads

    params = {k: models.store[k] + 1e-3 * rng.normal(size=models.store[k].shape) for k in net.param_names()}
    rep = finite_difference_check(loss, params)
    assert rep.passed, rep.rel_errors
    q, _ = net.forward_batch(f1, f2)
    assert pose_loss(q, q_gt) == pytest.approx(pose_loss(q, -q_gt))


def test_checkpoint_restores_models(tmp_path, models):
    save_checkpoint(tmp_path / "m.npz", models.store, models.metadata())
    store, meta = load_checkpoint(tmp_path / "m.npz")
    back = PoseModels.from_checkpoint(store, meta)
    assert back.config == SMALL
    a, _ = patch_pair(1)
    assert np.array_equal(encode(back.ppf, a).vector, encode(models.ppf, a).vector)

import numpy as np
import pytest

from conftest import random_transform
from directreg.bench.synthetic import FragmentPair, SceneSpec, generate_synthetic_pair
from directreg.core3d import PointCloud, RigidTransform, apply_transform, quat_canonicalize
from directreg.errors import NoOverlap
from directreg.models import ModelConfig, PoseModels
from directreg.tensornet import adam_step
from directreg.training import (LossBreakdown, PairBatch, TrainConfig, compute_losses, evaluate_losses, pose_loss,
                                sample_training_pairs, train, train_epoch)

SMALL = ModelConfig(latent_dim=16, n_patch=64, point_widths=(16, 32), fold_widths=(16, 16),
                    relative_widths=(32, 16, 8))
VOXEL, RADIUS = 0.1, 0.45


@pytest.fixture(scope="module")
def pair():
    return generate_synthetic_pair(SceneSpec(), 0.7, 0.0, seed=11)


@pytest.fixture(scope="module")
def batch(pair):
    samples = sample_training_pairs([pair], 0.05, 12, 0, VOXEL, RADIUS, SMALL.n_patch)
    return PairBatch.from_samples(samples)


def fresh():
    return PoseModels.build(SMALL)


def test_breakdown_is_additive(batch):
    cfg = TrainConfig(lambda1=0.7, lambda2=2.5)
    b, _ = compute_losses(fresh(), batch, cfg)
    assert b.total == pytest.approx(b.l_rec + 0.7 * b.l_pose + 2.5 * b.l_feat, abs=1e-12)
    assert min(b.as_row()) >= 0


def test_zero_weights_leave_reconstruction_only(batch):
    b, _ = compute_losses(fresh(), batch, TrainConfig(lambda1=0, lambda2=0))
    assert abs(b.total - b.l_rec) <= 1e-12


def test_exact_prediction_gives_zero_pose_loss(batch):
    m = fresh()
    q = quat_canonicalize([0.9, 0.1, -0.3, 0.2])
    m.store["rel.3.W"] = np.zeros_like(m.store["rel.3.W"])
    m.store["rel.3.b"] = q
    same = PairBatch(batch.pc_a, batch.pc_b, batch.ppf_a, batch.ppf_b, np.tile(q, (len(batch), 1)))
    b, _ = compute_losses(m, same, TrainConfig())
    assert b.l_pose == pytest.approx(0.0, abs=1e-15)
    # Batches store canonical labels, and the standalone loss ignores the sign.
    assert np.all(batch.q_gt[:, 0] >= 0)
    assert pose_loss(q, -q) == pytest.approx(0.0, abs=1e-15)


def test_identical_patches_give_zero_feature_loss(batch):
    same = PairBatch(batch.pc_a, batch.pc_a, batch.ppf_a, batch.ppf_a, batch.q_gt)
    b, _ = compute_losses(fresh(), same, TrainConfig())
    assert b.l_feat == 0.0


@pytest.mark.parametrize("toggle,untouched", [
    ("use_rec", ".fold"),
    ("use_pose", "rel."),
])
def test_disabled_loss_has_no_gradient(batch, toggle, untouched):
    m = fresh()
    cfg = TrainConfig(**{toggle: False})
    b, grads = compute_losses(m, batch, cfg)
    assert getattr(b, {"use_rec": "l_rec", "use_pose": "l_pose"}[toggle]) == 0.0
    names = [k for k in m.store.keys() if untouched in k]
    assert names and not any(k in grads for k in names)
    before = {k: m.store[k].copy() for k in names}
    adam_step(m.store, grads, 1e-2)
    for k in names:
        assert np.array_equal(m.store[k], before[k])


def test_feature_only_touches_ppf_encoder(batch):
    _, grads = compute_losses(fresh(), batch, TrainConfig(use_rec=False, use_pose=False))
    assert grads and all(k.startswith("ppf.") and ".fold" not in k for k in grads)


def test_identity_ground_truth_labels():
    c = generate_synthetic_pair(SceneSpec(), 1.0, 0.0, seed=2).cloud_a
    same = FragmentPair(c, c, RigidTransform.identity(), 1.0, 0.0, "self")
    samples = sample_training_pairs([same], 0.05, 5, 0, VOXEL, RADIUS, 32)
    for s in samples:
        np.testing.assert_array_equal(s.gt_rotation, [1, 0, 0, 0])


def test_moved_copy_carries_rotation(rng):
    c = generate_synthetic_pair(SceneSpec(), 1.0, 0.0, seed=3).cloud_a
    t = random_transform(rng)
    from directreg.core3d import invert_transform
    moved = apply_transform(t, c)
    pair = FragmentPair(c, moved, invert_transform(t), 1.0, 0.0, "moved")
    samples = sample_training_pairs([pair], 0.05, 8, 0, VOXEL, RADIUS, 32)
    assert len(samples) == 8
    for s in samples:
        np.testing.assert_allclose(s.gt_rotation, invert_transform(t).rotation, atol=1e-12)
        np.testing.assert_allclose(invert_transform(t).transform_points(s.p2), s.p1, atol=0.05)


def test_disjoint_fragments_raise():
    a = PointCloud(np.random.default_rng(0).uniform(0, 1, (200, 3)), np.tile([0, 0, 1.0], (200, 1)))
    b = PointCloud(a.points + 50.0, a.normals)
    with pytest.raises(NoOverlap):
        sample_training_pairs([FragmentPair(a, b, RigidTransform.identity(), 0.0, 0.0, "x")],
                              0.05, 4, 0, VOXEL, RADIUS, 16)


def test_sampling_is_deterministic(pair):
    a = sample_training_pairs([pair], 0.05, 6, 4, VOXEL, RADIUS, 32)
    b = sample_training_pairs([pair], 0.05, 6, 4, VOXEL, RADIUS, 32)
    for x, y in zip(a, b):
        assert np.array_equal(x.patch_a.points, y.patch_a.points)
        assert np.array_equal(x.p2, y.p2)


def test_zero_learning_rate_is_evaluation(batch):
    m = fresh()
    before = m.store.copy()
    cfg = TrainConfig(lr=0.0, batch_size=5)
    epoch = train_epoch(m, batch, cfg)
    for k in m.store.keys():
        assert np.array_equal(m.store[k], before[k])
    ref = evaluate_losses(m, batch, cfg)
    np.testing.assert_allclose(epoch.as_row(), ref.as_row(), rtol=1e-12)


def test_same_seed_same_checkpoint(batch):
    cfg = TrainConfig(epochs=2, batch_size=4, augment_rotation=0.5)
    a, b = fresh(), fresh()
    train(a, batch, cfg)
    train(b, batch, cfg)
    for k in a.store.keys():
        assert np.array_equal(a.store[k], b.store[k])


def test_training_log_csv(tmp_path, batch):
    history = train(fresh(), batch, TrainConfig(epochs=2), log_path=tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,l_rec,l_pose,l_feat,total"
    assert len(lines) == 3 and len(history) == 2
    assert isinstance(history[0], LossBreakdown)


def test_config_file_round_trip(tmp_path):
    cfg = TrainConfig(lambda1=0.5, use_feat=False, epochs=3, lr=2e-4)
    cfg.to_file(tmp_path / "t.cfg")
    assert TrainConfig.from_file(tmp_path / "t.cfg") == cfg
    (tmp_path / "bad.cfg").write_text("nonsense = 1\n")
    with pytest.raises(ValueError):
        TrainConfig.from_file(tmp_path / "bad.cfg")


def test_rotated_batch_relabels(batch, rng):
    from directreg.core3d import quat_multiply, quat_conjugate, random_quat
    ra = np.stack([random_quat(rng) for _ in range(len(batch))])
    rb = np.stack([random_quat(rng) for _ in range(len(batch))])
    rot = batch.rotated(ra, rb)
    i = 0
    expect = quat_canonicalize(quat_multiply(quat_multiply(ra[i], batch.q_gt[i]), quat_conjugate(rb[i])))
    np.testing.assert_allclose(rot.q_gt[i], expect, atol=1e-12)
    np.testing.assert_array_equal(rot.ppf_a, batch.ppf_a)


def test_pose_loss_decreases_over_ten_epochs(trained_all):
    history = trained_all[1]
    assert len(history) >= 10
    assert history[9].l_pose < history[0].l_pose

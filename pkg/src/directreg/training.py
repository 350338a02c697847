"""Multi-task loss, training-pair sampling and the Adam training loop."""
from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from directreg.core3d import (PointCloud, RigidTransform, quat_canonicalize, quat_multiply,
                              quat_conjugate, quats_to_matrices, random_quat)
from directreg.errors import EmptyInput, NoOverlap, ShapeMismatch
from directreg.models import PoseModels, canonical_sign
from directreg.patches import (LocalPatch, encode_patch_ppfs, extract_patch, keypoint_positions,
                               sample_keypoints)
from directreg.tensornet import adam_step, chamfer_batch, l2_norm_rows


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    use_rec: bool = True
    use_pose: bool = True
    use_feat: bool = True
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    n_patch: int = 256
    latent_dim: int = 64
    # Random rotation (radians) applied jointly to both patches of a pair each
    # epoch; 0 disables it.
    augment_rotation: float = 0.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Read flat ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            kwargs[key] = _parse_value(types[key], value, f"{path}:{lineno}")
        return cls(**kwargs)

    def to_file(self, path) -> None:
        lines = [f"{f.name} = {_format_value(getattr(self, f.name))}" for f in fields(self)]
        Path(path).write_text("\n".join(lines) + "\n")


def _parse_value(kind, value: str, where: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    if kind == "bool":
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{where}: bad boolean {value!r}")
    if kind == "int":
        return int(value)
    return float(value)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)


@dataclass
class LossBreakdown:
    l_rec: float = 0.0
    l_pose: float = 0.0
    l_feat: float = 0.0
    total: float = 0.0

    def as_row(self) -> list[float]:
        return [self.l_rec, self.l_pose, self.l_feat, self.total]


@dataclass(frozen=True, eq=False)
class PatchPairSample:
    """Corresponding patches; ``gt_rotation`` maps patch b's frame onto patch a's."""

    patch_a: LocalPatch
    patch_b: LocalPatch
    gt_rotation: np.ndarray
    p1: np.ndarray
    p2: np.ndarray


@dataclass
class PairBatch:
    """Network-ready arrays for a batch of patch pairs."""

    pc_a: np.ndarray
    pc_b: np.ndarray
    ppf_a: np.ndarray
    ppf_b: np.ndarray
    q_gt: np.ndarray

    def __len__(self) -> int:
        return len(self.q_gt)

    @classmethod
    def from_samples(cls, samples: Sequence[PatchPairSample]) -> "PairBatch":
        if not samples:
            raise EmptyInput("empty batch")
        return cls(
            pc_a=np.stack([s.patch_a.points for s in samples]),
            pc_b=np.stack([s.patch_b.points for s in samples]),
            ppf_a=np.stack([encode_patch_ppfs(s.patch_a).signatures for s in samples]),
            ppf_b=np.stack([encode_patch_ppfs(s.patch_b).signatures for s in samples]),
            q_gt=np.stack([quat_canonicalize(s.gt_rotation) for s in samples]),
        )

    def subset(self, idx) -> "PairBatch":
        return PairBatch(self.pc_a[idx], self.pc_b[idx], self.ppf_a[idx], self.ppf_b[idx], self.q_gt[idx])

    def rotated(self, rot_a: np.ndarray, rot_b: np.ndarray) -> "PairBatch":
        """Rotate every patch a by ``rot_a[i]`` and patch b by ``rot_b[i]``.

        PPF rows are rotation invariant and stay as they are; the relative
        rotation label becomes ``Ra * q * Rb^-1``.
        """
        ma = quats_to_matrices(rot_a)
        mb = quats_to_matrices(rot_b)
        q = np.stack([quat_canonicalize(quat_multiply(quat_multiply(a, g), quat_conjugate(b)))
                      for a, g, b in zip(rot_a, self.q_gt, rot_b)])
        return PairBatch(np.einsum("bij,bnj->bni", ma, self.pc_a),
                         np.einsum("bij,bnj->bni", mb, self.pc_b),
                         self.ppf_a, self.ppf_b, q)


def sample_training_pairs(pairs: Iterable, r_match: float, per_pair: int, seed: int,
                          voxel: float, radius: float, n_patch: int) -> list[PatchPairSample]:
    """Patch pairs at keypoints that coincide under the ground-truth transform.

    ``pairs`` yields objects with ``cloud_a``, ``cloud_b`` and ``gt_transform``
    (b to a). Keypoints ``p1`` in a and ``p2`` in b match when
    ``|T_gt(p2) - p1| < r_match``; up to ``per_pair`` matches are drawn per pair.

    Raises:
        NoOverlap: no pair produced a single match.
    """
    rng = np.random.default_rng(seed)
    out: list[PatchPairSample] = []
    for pi, pair in enumerate(pairs):
        a: PointCloud = pair.cloud_a
        b: PointCloud = pair.cloud_b
        gt: RigidTransform = pair.gt_transform
        kps_a = sample_keypoints(a, voxel)
        kps_b = sample_keypoints(b, voxel)
        if not kps_a or not kps_b:
            continue
        pos_a = keypoint_positions(kps_a)
        pos_b = gt.transform_points(keypoint_positions(kps_b))
        dist, nn = cKDTree(pos_a).query(pos_b)
        matched = np.flatnonzero(dist < r_match)
        if len(matched) == 0:
            continue
        take = np.sort(rng.choice(matched, min(per_pair, len(matched)), replace=False))
        tree_a = cKDTree(a.points)
        tree_b = cKDTree(b.points)
        for jb in take:
            ka, kb = kps_a[nn[jb]], kps_b[jb]
            pseed = int(rng.integers(2 ** 31))
            out.append(PatchPairSample(
                patch_a=extract_patch(a, ka, radius, n_patch, (pseed, 0), tree_a),
                patch_b=extract_patch(b, kb, radius, n_patch, (pseed, 1), tree_b),
                gt_rotation=gt.rotation.copy(),
                p1=ka.position.copy(),
                p2=kb.position.copy(),
            ))
    if not out:
        raise NoOverlap("no keypoint matches under the ground-truth transforms")
    return out


def compute_losses(models: PoseModels, batch, cfg: TrainConfig,
                   params=None) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Loss breakdown and gradients for one batch of patch pairs.

    ``L = L_rec + lambda1 * L_pose + lambda2 * L_feat`` where ``L_rec`` averages
    half the sum of the point and PPF Chamfer distances over all patches,
    ``L_pose`` averages ``|q - q_gt|`` over pairs and ``L_feat`` averages the
    distance between the invariant latents of the two patches. Disabled terms
    are exactly zero and produce no gradient entries.
    """
    if not isinstance(batch, PairBatch):
        batch = PairBatch.from_samples(batch)
    bsz = len(batch)
    if bsz == 0:
        raise EmptyInput("empty batch")
    if batch.pc_a.shape != batch.pc_b.shape or batch.ppf_a.shape[:2] != batch.pc_a.shape[:2]:
        raise ShapeMismatch("inconsistent batch arrays")
    params = models.store if params is None else params
    out = LossBreakdown()
    grads: dict[str, np.ndarray] = {}
    if not (cfg.use_rec or cfg.use_pose or cfg.use_feat):
        return out, grads

    x_pc = np.concatenate([batch.pc_a, batch.pc_b])
    x_ppf = np.concatenate([batch.ppf_a, batch.ppf_b])
    z_ppf, t_ppf = models.ppf.encode_batch(x_ppf, params)
    z_pc, t_pc = models.pc.encode_batch(x_pc, params)
    gz_ppf = np.zeros_like(z_ppf)
    gz_pc = np.zeros_like(z_pc)

    if cfg.use_rec:
        n = 2 * bsz
        rec_ppf, td_ppf = models.ppf.decode_batch(z_ppf, params)
        rec_pc, td_pc = models.pc.decode_batch(z_pc, params)
        c_pc, _, g_rec_pc = chamfer_batch(x_pc, rec_pc)
        c_ppf, _, g_rec_ppf = chamfer_batch(x_ppf, rec_ppf)
        out.l_rec = float(np.mean(0.5 * (c_pc + c_ppf)))
        w = 0.5 / n
        g, gz = models.ppf.decode_backward(td_ppf, w * g_rec_ppf)
        grads.update(g)
        gz_ppf += gz
        g, gz = models.pc.decode_backward(td_pc, w * g_rec_pc)
        grads.update(g)
        gz_pc += gz

    if cfg.use_pose:
        f = z_pc - z_ppf
        q, t_rel = models.relative.forward_batch(f[:bsz], f[bsz:], params)
        norms, unit = l2_norm_rows(q - batch.q_gt)
        out.l_pose = float(norms.mean())
        g, gf1, gf2 = models.relative.backward(t_rel, cfg.lambda1 * unit / bsz)
        grads.update(g)
        gf = np.concatenate([gf1, gf2])
        gz_pc += gf
        gz_ppf -= gf

    if cfg.use_feat:
        norms, unit = l2_norm_rows(z_ppf[:bsz] - z_ppf[bsz:])
        out.l_feat = float(norms.mean())
        g = cfg.lambda2 * unit / bsz
        gz_ppf[:bsz] += g
        gz_ppf[bsz:] -= g

    grads.update(models.ppf.encode_backward(t_ppf, gz_ppf))
    if cfg.use_rec or cfg.use_pose:
        grads.update(models.pc.encode_backward(t_pc, gz_pc))
    out.total = out.l_rec + cfg.lambda1 * out.l_pose + cfg.lambda2 * out.l_feat
    return out, grads


def pose_loss(q: np.ndarray, q_gt: np.ndarray) -> float:
    """Mean ``|q - q_gt|`` after putting both on the canonical hemisphere."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, 4)
    q_gt = np.asarray(q_gt, dtype=np.float64).reshape(-1, 4)
    q = q * canonical_sign(q)[:, None] / np.linalg.norm(q, axis=1, keepdims=True)
    q_gt = q_gt * canonical_sign(q_gt)[:, None] / np.linalg.norm(q_gt, axis=1, keepdims=True)
    return float(np.linalg.norm(q - q_gt, axis=1).mean())


def train_epoch(models: PoseModels, dataset: PairBatch, cfg: TrainConfig,
                epoch: int = 0) -> LossBreakdown:
    """One shuffled pass of mini-batch Adam; returns sample-weighted mean losses."""
    rng = np.random.default_rng((cfg.seed, epoch))
    data = dataset
    if cfg.augment_rotation > 0:
        rot = np.stack([random_quat(rng, cfg.augment_rotation) for _ in range(len(dataset))])
        data = dataset.rotated(rot, rot)
    order = rng.permutation(len(data))
    acc = np.zeros(4)
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        losses, grads = compute_losses(models, data.subset(idx), cfg)
        acc += len(idx) * np.array(losses.as_row())
        if cfg.lr != 0.0:
            adam_step(models.store, grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return LossBreakdown(*(acc / max(1, len(order))))


def evaluate_losses(models: PoseModels, dataset: PairBatch, cfg: TrainConfig,
                    chunk: int = 32) -> LossBreakdown:
    acc = np.zeros(4)
    for start in range(0, len(dataset), chunk):
        idx = np.arange(start, min(start + chunk, len(dataset)))
        losses, _ = compute_losses(models, dataset.subset(idx), cfg)
        acc += len(idx) * np.array(losses.as_row())
    return LossBreakdown(*(acc / max(1, len(dataset))))


def train(models: PoseModels, dataset: PairBatch, cfg: TrainConfig,
          log_path: Optional[Path] = None, progress=None) -> list[LossBreakdown]:
    """Run ``cfg.epochs`` epochs; optionally write the per-epoch loss CSV."""
    history = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "l_rec", "l_pose", "l_feat", "total"])
    try:
        for epoch in range(cfg.epochs):
            losses = train_epoch(models, dataset, cfg, epoch)
            history.append(losses)
            if writer is not None:
                writer.writerow([epoch + 1, *(f"{v:.10g}" for v in losses.as_row())])
                fh.flush()
            if progress is not None:
                progress(epoch + 1, losses)
    finally:
        if fh is not None:
            fh.close()
    return history

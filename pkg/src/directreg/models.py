"""Twin folding auto-encoders (PPF input and raw-point input) and RelativeNet."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from directreg.errors import ShapeMismatch, VariantMismatch, ZeroQuaternion
from directreg.patches import LocalPatch, encode_patch_ppfs
from directreg.tensornet import (MlpSpec, MlpTape, ParamStore, backprop, init_mlp,
                                 max_pool_backward, max_pool_rows, mlp_forward,
                                 unit_normalize, unit_normalize_backward)

VARIANT_PPF = "ppf"
VARIANT_PC = "pc"
VARIANT_WIDTH = {VARIANT_PC: 3, VARIANT_PPF: 4}

# Pre-normalization quaternion norm below which RelativeNet output is rejected.
_MIN_QUAT_NORM = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 64
    n_patch: int = 256
    point_widths: tuple[int, ...] = (64, 128)
    fold_widths: tuple[int, ...] = (64, 64)
    relative_widths: tuple[int, ...] = (256, 128, 64)
    seed: int = 0

    @property
    def grid_side(self) -> int:
        return math.ceil(math.sqrt(self.n_patch))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kw = dict(d)
        for key in ("point_widths", "fold_widths", "relative_widths"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class LatentDescriptor:
    vector: np.ndarray
    variant: str


@dataclass(frozen=True, eq=False)
class PoseFeature:
    vector: np.ndarray


def folding_grid(m: int) -> np.ndarray:
    """``m * m`` points of a regular grid on ``[-1, 1]^2``, row-major."""
    ticks = np.linspace(-1.0, 1.0, m)
    gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


def patch_input(variant: str, patch: LocalPatch) -> np.ndarray:
    """Network input rows for a patch: normalized points or PPF signatures."""
    if variant == VARIANT_PC:
        return patch.points
    if variant == VARIANT_PPF:
        return encode_patch_ppfs(patch).signatures
    raise VariantMismatch(f"unknown variant {variant!r}")


@dataclass
class _EncodeTape:
    point: MlpTape
    pool_idx: np.ndarray
    n_rows: int
    latent: MlpTape


@dataclass
class _DecodeTape:
    fold1: MlpTape
    fold2: MlpTape
    latent_dim: int


class FoldNet:
    """PointNet-style encoder with a two-stage folding decoder.

    Encoder: per-row MLP, column-wise max pool, then a linear map to the latent.
    Decoder: grid ++ z -> fold 1 -> (fold 1 output) ++ z -> fold 2.
    """

    def __init__(self, variant: str, store: ParamStore, prefix: str, latent_dim: int,
                 point_widths: Sequence[int], fold_widths: Sequence[int], grid_side: int):
        if variant not in VARIANT_WIDTH:
            raise VariantMismatch(f"unknown variant {variant!r}")
        self.variant = variant
        self.store = store
        self.prefix = prefix
        self.latent_dim = latent_dim
        self.grid_side = grid_side
        width = VARIANT_WIDTH[variant]
        self.width = width
        relu = lambda n: ("relu",) * n  # noqa: E731
        self.point_spec = MlpSpec(width, tuple(point_widths), relu(len(point_widths)))
        self.latent_spec = MlpSpec(point_widths[-1], (latent_dim,), ("none",))
        fw = tuple(fold_widths)
        self.fold1_spec = MlpSpec(2 + latent_dim, fw + (width,), relu(len(fw)) + ("none",))
        self.fold2_spec = MlpSpec(width + latent_dim, fw + (width,), relu(len(fw)) + ("none",))
        self.grid = folding_grid(grid_side)

    def init_params(self, rng: np.random.Generator) -> None:
        for name, spec in self._specs():
            init_mlp(spec, self.store, f"{self.prefix}.{name}", rng)

    def _specs(self):
        return [("point", self.point_spec), ("latent", self.latent_spec),
                ("fold1", self.fold1_spec), ("fold2", self.fold2_spec)]

    def param_names(self) -> list[str]:
        return [k for k in self.store.keys() if k.startswith(self.prefix + ".")]

    def decoder_param_names(self) -> list[str]:
        return [k for k in self.param_names()
                if k.startswith((f"{self.prefix}.fold1.", f"{self.prefix}.fold2."))]

    # -- batched passes ---------------------------------------------------

    def encode_batch(self, x: np.ndarray, params=None) -> tuple[np.ndarray, _EncodeTape]:
        """``(B, n, width)`` rows to ``(B, D)`` latents."""
        params = self.store if params is None else params
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[-1] != self.width:
            raise ShapeMismatch(f"{self.variant} encoder expects (B, n, {self.width}), got {x.shape}")
        h, t_point = mlp_forward(self.point_spec, params, x, f"{self.prefix}.point")
        pooled, idx = max_pool_rows(h)
        z, t_lat = mlp_forward(self.latent_spec, params, pooled, f"{self.prefix}.latent")
        return z, _EncodeTape(t_point, idx, x.shape[1], t_lat)

    def encode_backward(self, tape: _EncodeTape, gz: np.ndarray) -> dict[str, np.ndarray]:
        grads, g_pooled = backprop(tape.latent, gz)
        g_h = max_pool_backward(g_pooled, tape.pool_idx, tape.n_rows)
        g_point, _ = backprop(tape.point, g_h)
        grads.update(g_point)
        return grads

    def decode_batch(self, z: np.ndarray, params=None) -> tuple[np.ndarray, _DecodeTape]:
        """``(B, D)`` latents to ``(B, m*m, width)`` reconstructions."""
        params = self.store if params is None else params
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeMismatch(f"decoder expects (B, {self.latent_dim}), got {z.shape}")
        bsz, rows = len(z), len(self.grid)
        zr = np.broadcast_to(z[:, None, :], (bsz, rows, self.latent_dim))
        grid = np.broadcast_to(self.grid, (bsz, rows, 2))
        y1, t1 = mlp_forward(self.fold1_spec, params, np.concatenate([grid, zr], axis=2),
                             f"{self.prefix}.fold1")
        y2, t2 = mlp_forward(self.fold2_spec, params, np.concatenate([y1, zr], axis=2),
                             f"{self.prefix}.fold2")
        return y2, _DecodeTape(t1, t2, self.latent_dim)

    def decode_backward(self, tape: _DecodeTape, grec: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        grads, g_in2 = backprop(tape.fold2, grec)
        g_y1 = g_in2[..., :self.width]
        gz = g_in2[..., self.width:].sum(axis=1)
        g1, g_in1 = backprop(tape.fold1, g_y1)
        grads.update(g1)
        gz = gz + g_in1[..., 2:].sum(axis=1)
        return grads, gz

    # -- single-patch conveniences -----------------------------------------

    def encode(self, patch: LocalPatch) -> LatentDescriptor:
        z, _ = self.encode_batch(patch_input(self.variant, patch)[None])
        return LatentDescriptor(z[0], self.variant)

    def encode_many(self, patches: Sequence[LocalPatch], chunk: int = 64) -> np.ndarray:
        """Latents for many patches as an ``(N, D)`` array."""
        out = []
        for i in range(0, len(patches), chunk):
            x = np.stack([patch_input(self.variant, p) for p in patches[i:i + chunk]])
            out.append(self.encode_batch(x)[0])
        return np.concatenate(out) if out else np.zeros((0, self.latent_dim))

    def decode_fold(self, z: LatentDescriptor) -> np.ndarray:
        vec = np.asarray(z.vector if isinstance(z, LatentDescriptor) else z, dtype=np.float64)
        if vec.shape != (self.latent_dim,):
            raise ShapeMismatch(f"latent of shape {vec.shape}, expected ({self.latent_dim},)")
        return self.decode_batch(vec[None])[0][0]


def canonical_sign(q: np.ndarray) -> np.ndarray:
    """Per-row sign (+1/-1) that makes ``q`` canonical (w >= 0, tie on first nonzero)."""
    key = q[..., 0].copy()
    for c in (1, 2, 3):
        key = np.where(key == 0.0, q[..., c], key)
    return np.where(key < 0.0, -1.0, 1.0)


@dataclass
class _RelTape:
    mlp: MlpTape
    sign: np.ndarray


class RelativeNet:
    """Four affine layers from concatenated pose features to a unit quaternion."""

    def __init__(self, store: ParamStore, prefix: str, latent_dim: int,
                 hidden: Sequence[int] = (256, 128, 64)):
        if len(hidden) != 3:
            raise ValueError("RelativeNet has exactly four affine layers (three hidden)")
        self.store = store
        self.prefix = prefix
        self.latent_dim = latent_dim
        self.spec = MlpSpec(2 * latent_dim, tuple(hidden) + (4,),
                            ("relu", "relu", "relu", "none"), output_norm="none")

    def init_params(self, rng: np.random.Generator) -> None:
        init_mlp(self.spec, self.store, self.prefix, rng)

    def param_names(self) -> list[str]:
        return [k for k in self.store.keys() if k.startswith(self.prefix + ".")]

    def forward_batch(self, f1: np.ndarray, f2: np.ndarray, params=None) -> tuple[np.ndarray, _RelTape]:
        """``(B, D)`` pose features of patch 1 and patch 2 to ``(B, 4)`` canonical quaternions.

        The quaternion rotates the frame of patch 2 onto that of patch 1.
        """
        params = self.store if params is None else params
        f1 = np.asarray(f1, dtype=np.float64)
        f2 = np.asarray(f2, dtype=np.float64)
        if f1.shape != f2.shape or f1.ndim != 2 or f1.shape[1] != self.latent_dim:
            raise ShapeMismatch(f"pose features {f1.shape} / {f2.shape}, expected (B, {self.latent_dim})")
        raw, t_mlp = mlp_forward(self.spec, params, np.concatenate([f1, f2], axis=1), self.prefix)
        norm = np.linalg.norm(raw, axis=1)
        if np.any(norm < _MIN_QUAT_NORM):
            raise ZeroQuaternion("RelativeNet produced a (near) zero quaternion")
        q, norm = unit_normalize(raw)
        sign = canonical_sign(q)
        return q * sign[:, None], _RelTape(t_mlp, sign)

    def backward(self, tape: _RelTape, gq: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
        """Gradients w.r.t. parameters, ``f1`` and ``f2``."""
        g = gq * tape.sign[:, None]
        raw = tape.mlp.output
        norm = np.linalg.norm(raw, axis=1, keepdims=True)
        g = unit_normalize_backward(g, raw / norm, norm)
        grads, g_in = backprop(tape.mlp, g)
        return grads, g_in[:, :self.latent_dim], g_in[:, self.latent_dim:]


def relative_pose_forward(model: RelativeNet, f1: PoseFeature, f2: PoseFeature) -> np.ndarray:
    q, _ = model.forward_batch(np.asarray(f1.vector)[None], np.asarray(f2.vector)[None])
    return q[0]


def pose_feature(pc_latent: LatentDescriptor, ppf_latent: LatentDescriptor) -> PoseFeature:
    """Pose-variant latent minus invariant latent."""
    if pc_latent.variant != VARIANT_PC or ppf_latent.variant != VARIANT_PPF:
        raise VariantMismatch(f"expected (pc, ppf) latents, got ({pc_latent.variant}, {ppf_latent.variant})")
    a = np.asarray(pc_latent.vector, dtype=np.float64)
    b = np.asarray(ppf_latent.vector, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"latent shapes {a.shape} vs {b.shape}")
    return PoseFeature(a - b)


def encode(model: FoldNet, patch: LocalPatch) -> LatentDescriptor:
    return model.encode(patch)


def decode_fold(model: FoldNet, z: LatentDescriptor) -> np.ndarray:
    return model.decode_fold(z)


@dataclass
class PoseModels:
    """Both auto-encoders and RelativeNet sharing one parameter store."""

    config: ModelConfig
    store: ParamStore = field(default_factory=ParamStore)

    def __post_init__(self):
        c = self.config
        self.ppf = FoldNet(VARIANT_PPF, self.store, "ppf", c.latent_dim, c.point_widths,
                           c.fold_widths, c.grid_side)
        self.pc = FoldNet(VARIANT_PC, self.store, "pc", c.latent_dim, c.point_widths,
                          c.fold_widths, c.grid_side)
        self.relative = RelativeNet(self.store, "rel", c.latent_dim, c.relative_widths)

    @classmethod
    def build(cls, config: ModelConfig, seed: Optional[int] = None) -> "PoseModels":
        models = cls(config)
        rng = np.random.default_rng(config.seed if seed is None else seed)
        models.ppf.init_params(rng)
        models.pc.init_params(rng)
        models.relative.init_params(rng)
        return models

    def metadata(self) -> dict:
        return {"kind": "pose-models", "config": self.config.to_dict()}

    @classmethod
    def from_checkpoint(cls, store: ParamStore, metadata: dict) -> "PoseModels":
        if metadata.get("kind") != "pose-models":
            raise ValueError("checkpoint does not hold pose models")
        return cls(ModelConfig.from_dict(metadata["config"]), store)

    def describe(self, patches: Sequence[LocalPatch]) -> tuple[np.ndarray, np.ndarray]:
        """Invariant (PPF) and pose-variant (PC) latents for a list of patches.

        The pose feature of each patch is ``pc - ppf``.
        """
        return self.ppf.encode_many(patches), self.pc.encode_many(patches)

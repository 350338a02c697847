"""Keypoints plus learned descriptors for a whole fragment."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from directreg.core3d import PointCloud
from directreg.models import PoseModels
from directreg.patches import extract_patches, keypoint_positions, sample_keypoints


@dataclass(eq=False)
class FragmentFeatures:
    """Per-keypoint invariant (``ppf``) and pose-variant (``pc``) latents."""

    keypoints: np.ndarray
    ppf: np.ndarray
    pc: np.ndarray

    def __len__(self) -> int:
        return len(self.keypoints)

    @property
    def pose(self) -> np.ndarray:
        return self.pc - self.ppf

    def descriptors(self, source: str) -> np.ndarray:
        if source in ("ppf", "ppf-invariant"):
            return self.ppf
        if source in ("pc", "pc-variant"):
            return self.pc
        raise ValueError(f"unknown descriptor source {source!r}")

    def save(self, path) -> None:
        meta = json.dumps({"format": "directreg-descriptors", "version": 1})
        with open(Path(path), "wb") as fh:
            np.savez(fh, keypoints=self.keypoints, ppf=self.ppf, pc=self.pc,
                     __meta__=np.frombuffer(meta.encode(), dtype=np.uint8))

    @classmethod
    def load(cls, path) -> "FragmentFeatures":
        with np.load(Path(path), allow_pickle=False) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("format") != "directreg-descriptors":
                raise ValueError(f"{path}: not a descriptor file")
            return cls(data["keypoints"], data["ppf"], data["pc"])


def describe_fragment(models: PoseModels, cloud: PointCloud, voxel: float, radius: float,
                      seed: int = 0) -> FragmentFeatures:
    kps = sample_keypoints(cloud, voxel)
    patches = extract_patches(cloud, kps, radius, models.config.n_patch, seed)
    ppf, pc = models.describe(patches)
    return FragmentFeatures(keypoint_positions(kps), ppf, pc)

"""Fragment-matching and registration metrics, and hypothesis dumps."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from statistics import median
from typing import Optional, Sequence

import numpy as np

from directreg.core3d import RigidTransform, quat_angle, quat_to_rodrigues, transform_error
from directreg.errors import EmptySet
from directreg.matching import CorrespondenceSet

MATCH_THRESHOLD = 0.05
DEFAULT_THETA_MAX = math.radians(15.0)
DEFAULT_T_MAX_FRACTION = 0.1
# Absorbs rounding when a ratio such as 3/60 is compared against 0.05.
_RATIO_SLACK = 1e-12


@dataclass
class PairRecord:
    """One row of an evaluation report; ``None`` marks a section that was not run."""

    pair_id: str
    n_correspondences: Optional[int] = None
    inlier_ratio: Optional[float] = None
    matched: Optional[bool] = None
    registered: Optional[bool] = None
    accepted: Optional[bool] = None
    overlapping: bool = True
    rotation_error: Optional[float] = None
    translation_error: Optional[float] = None
    runtime: Optional[float] = None
    n_hypotheses: Optional[int] = None


def _fraction(num: int, den: int) -> float:
    return num / den if den else 0.0


@dataclass
class EvalReport:
    """Per-pair records; every aggregate is computed from them on demand."""

    records: list[PairRecord]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def matching_recall(self) -> float:
        rows = [r for r in self.records if r.matched is not None]
        return _fraction(sum(r.matched for r in rows), len(rows))

    @property
    def registration_recall(self) -> float:
        rows = [r for r in self.records if r.registered is not None and r.overlapping]
        return _fraction(sum(r.registered for r in rows), len(rows))

    @property
    def registration_precision(self) -> float:
        """Correct among accepted results; 0 when nothing was accepted."""
        rows = [r for r in self.records if r.registered is not None and r.accepted]
        return _fraction(sum(r.registered for r in rows), len(rows))

    @property
    def n_registered(self) -> int:
        return sum(bool(r.registered) for r in self.records)

    @property
    def n_matched(self) -> int:
        return sum(bool(r.matched) for r in self.records)

    def aggregates(self) -> dict[str, float]:
        return {
            "matching_recall": self.matching_recall,
            "registration_recall": self.registration_recall,
            "registration_precision": self.registration_precision,
        }

    def merge(self, other: "EvalReport") -> "EvalReport":
        """Combine two sections over the same pairs; set fields of ``other`` win."""
        by_id = {r.pair_id: r for r in self.records}
        out = []
        for r in other.records:
            base = by_id.pop(r.pair_id, PairRecord(r.pair_id))
            updates = {f.name: getattr(r, f.name) for f in fields(r) if getattr(r, f.name) is not None}
            out.append(replace(base, **updates))
        return EvalReport(list(by_id.values()) + out)

    def to_csv(self, path) -> None:
        names = [f.name for f in fields(PairRecord)]
        with open(Path(path), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=names)
            w.writeheader()
            for r in self.records:
                w.writerow({k: ("" if v is None else v) for k, v in asdict(r).items()})

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        casts = {"pair_id": str, "n_correspondences": int, "n_hypotheses": int,
                 "inlier_ratio": float, "rotation_error": float, "translation_error": float,
                 "runtime": float}
        records = []
        with open(Path(path), newline="") as fh:
            for row in csv.DictReader(fh):
                kw = {}
                for k, v in row.items():
                    if v == "":
                        kw[k] = None
                    elif k in casts:
                        kw[k] = casts[k](v)
                    else:
                        kw[k] = v == "True"
                records.append(PairRecord(**kw))
        return cls(records)


@dataclass(frozen=True, eq=False)
class PairMatches:
    """Keypoints of both fragments, their correspondences and the b→a ground truth."""

    pair_id: str
    kp_a: np.ndarray
    kp_b: np.ndarray
    gamma: CorrespondenceSet
    gt_transform: RigidTransform
    overlapping: bool = True


def true_match_mask(gamma: CorrespondenceSet, kp_a, kp_b, gt: RigidTransform,
                    r_inlier: float) -> np.ndarray:
    """``|T_gt(p_j) - p_i| < r_inlier`` for every ``(i, j)`` in ``gamma``."""
    if len(gamma) == 0:
        return np.zeros(0, dtype=bool)
    pa = np.asarray(kp_a, dtype=np.float64)[gamma.index_a]
    pb = gt.transform_points(np.asarray(kp_b, dtype=np.float64)[gamma.index_b])
    return np.linalg.norm(pb - pa, axis=1) < r_inlier


def is_matched(ratio: float, threshold: float = MATCH_THRESHOLD) -> bool:
    """Ratios at the threshold count as matched."""
    return ratio >= threshold - _RATIO_SLACK


def evaluate_fragment_matching(pairs: Sequence[PairMatches], r_inlier: float,
                               threshold: float = MATCH_THRESHOLD) -> EvalReport:
    records = []
    for p in pairs:
        mask = true_match_mask(p.gamma, p.kp_a, p.kp_b, p.gt_transform, r_inlier)
        ratio = float(mask.mean()) if len(mask) else 0.0
        records.append(PairRecord(p.pair_id, n_correspondences=len(p.gamma), inlier_ratio=ratio,
                                  matched=is_matched(ratio, threshold), overlapping=p.overlapping))
    return EvalReport(records)


def evaluate_registration_set(pairs: Sequence, results: Sequence, theta_max: float = DEFAULT_THETA_MAX,
                              t_max: Optional[float] = None, diameter: Optional[float] = None) -> EvalReport:
    """Correct iff rotation error < ``theta_max`` and translation error < ``t_max``.

    ``pairs`` need ``pair_id`` and ``gt_transform``; an ``overlap`` or
    ``overlapping`` attribute, if present, decides membership in the recall
    denominator. ``t_max`` defaults to ``0.1 * diameter``.
    """
    if len(pairs) != len(results):
        raise ValueError(f"{len(results)} results for {len(pairs)} pairs")
    if t_max is None:
        if diameter is None:
            raise ValueError("give t_max or the scene diameter")
        t_max = DEFAULT_T_MAX_FRACTION * diameter
    records = []
    for p, res in zip(pairs, results):
        rot_err, trans_err = transform_error(res.transform, p.gt_transform)
        overlapping = getattr(p, "overlapping", None)
        if overlapping is None:
            overlapping = getattr(p, "overlap", 1.0) > 0.0
        records.append(PairRecord(
            p.pair_id,
            registered=bool(rot_err < theta_max and trans_err < t_max),
            accepted=bool(res.reliable),
            overlapping=bool(overlapping),
            rotation_error=rot_err,
            translation_error=trans_err,
            runtime=float(res.time_total),
            n_hypotheses=int(res.n_hypotheses),
        ))
    return EvalReport(records)


@dataclass(frozen=True)
class HypothesisSummary:
    count: int
    median_angular_deviation: float
    median_translation_deviation: float


def hypothesis_deviations(hypotheses: Sequence, gt: RigidTransform) -> tuple[np.ndarray, np.ndarray]:
    """Angle (rad) and translation distance of each hypothesis from ``gt``."""
    ang = np.array([quat_angle(h.transform.rotation, gt.rotation) for h in hypotheses])
    tr = np.array([np.linalg.norm(h.transform.translation - gt.translation) for h in hypotheses])
    return ang, tr


def export_hypotheses_csv(hypotheses: Sequence, gt: RigidTransform, path) -> HypothesisSummary:
    """Write one row per hypothesis (Rodrigues rotation, translation, score) plus a GT row."""
    if not hypotheses:
        raise EmptySet("no hypotheses to export")
    ang, tr = hypothesis_deviations(hypotheses, gt)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "rodrigues_x", "rodrigues_y", "rodrigues_z", "t_x", "t_y", "t_z", "score"])
        for h in hypotheses:
            r = quat_to_rodrigues(h.transform.rotation)
            w.writerow(["hypothesis", *map(repr, map(float, r)),
                        *map(repr, map(float, h.transform.translation)), int(h.inlier_count)])
        r = quat_to_rodrigues(gt.rotation)
        w.writerow(["gt", *map(repr, map(float, r)), *map(repr, map(float, gt.translation)), ""])
    return HypothesisSummary(len(hypotheses), float(median(ang)), float(median(tr)))

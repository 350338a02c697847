"""Direct hypothesize-and-verify registration and the 3-point RANSAC baseline.

Keypoint arrays are ``(N, 3)`` positions in each fragment's own frame; every
transform maps fragment b into fragment a. A correspondence set indexes rows
of ``kp_a`` and ``kp_b``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from directreg.core3d import RigidTransform, kabsch_align, quat_to_matrix, quats_to_matrices
from directreg.errors import (DegenerateConfiguration, EmptyCorrespondences,
                              TooFewCorrespondences)
from directreg.matching import CorrespondenceSet

METHOD_DIRECT = "direct"
METHOD_RANSAC = "ransac"
MIN_INLIERS = 3
MAX_REFINE_ROUNDS = 10
# Hypotheses scored per vectorized block.
_SCORE_BLOCK = 256

RotationProvider = Callable[[CorrespondenceSet], np.ndarray]


@dataclass(frozen=True, eq=False)
class Hypothesis:
    transform: RigidTransform
    source_index: int
    inlier_count: int = 0
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass(eq=False)
class RegistrationResult:
    transform: RigidTransform
    score: int
    n_hypotheses: int
    time_generation: float
    time_verification: float
    method: str
    refined: bool
    inliers: np.ndarray
    hypotheses: list[Hypothesis] = field(default_factory=list)
    min_inliers: int = MIN_INLIERS

    @property
    def time_total(self) -> float:
        return self.time_generation + self.time_verification

    @property
    def reliable(self) -> bool:
        """False when the best score is below the minimum-inlier acceptance level."""
        return self.score >= self.min_inliers

    def to_record(self) -> dict:
        return {
            "method": self.method,
            "rotation": [float(v) for v in self.transform.rotation],
            "translation": [float(v) for v in self.transform.translation],
            "score": int(self.score),
            "reliable": bool(self.reliable),
            "refined": bool(self.refined),
            "n_hypotheses": int(self.n_hypotheses),
            "time_generation": float(self.time_generation),
            "time_verification": float(self.time_verification),
            "time_total": float(self.time_total),
        }


# --------------------------------------------------------------------------- rotation providers


class OracleRotations:
    """Returns one fixed rotation for every correspondence (testing aid)."""

    def __init__(self, rotation):
        self.rotation = np.asarray(rotation, dtype=np.float64)

    def __call__(self, gamma: CorrespondenceSet) -> np.ndarray:
        return np.tile(self.rotation, (len(gamma), 1))


class NetworkRotations:
    """RelativeNet prediction for each correspondence from per-keypoint pose features."""

    def __init__(self, relative_net, pose_a: np.ndarray, pose_b: np.ndarray, chunk: int = 512):
        self.net = relative_net
        self.pose_a = np.asarray(pose_a, dtype=np.float64)
        self.pose_b = np.asarray(pose_b, dtype=np.float64)
        self.chunk = chunk

    def __call__(self, gamma: CorrespondenceSet) -> np.ndarray:
        out = []
        for s in range(0, len(gamma), self.chunk):
            pairs = gamma.pairs[s:s + self.chunk]
            q, _ = self.net.forward_batch(self.pose_a[pairs[:, 0]], self.pose_b[pairs[:, 1]])
            out.append(q)
        return np.concatenate(out) if out else np.zeros((0, 4))


# --------------------------------------------------------------------------- building blocks


def translation_from_rotation(p1, p2, r) -> np.ndarray:
    """Translation that sends ``p2`` onto ``p1`` after rotating by ``r``: ``p1 - R p2``."""
    return np.asarray(p1, dtype=np.float64) - quat_to_matrix(r) @ np.asarray(p2, dtype=np.float64)


def generate_hypotheses(gamma: CorrespondenceSet, kp_a, kp_b,
                        rotation_provider: RotationProvider) -> list[Hypothesis]:
    """One transform per correspondence: provider rotation plus the induced translation."""
    if len(gamma) == 0:
        raise EmptyCorrespondences("no correspondences to build hypotheses from")
    kp_a = np.asarray(kp_a, dtype=np.float64)
    kp_b = np.asarray(kp_b, dtype=np.float64)
    quats = np.asarray(rotation_provider(gamma), dtype=np.float64).reshape(-1, 4)
    if len(quats) != len(gamma):
        raise ValueError(f"provider returned {len(quats)} rotations for {len(gamma)} correspondences")
    rots = quats_to_matrices(quats)
    p1 = kp_a[gamma.index_a]
    p2 = kp_b[gamma.index_b]
    trans = p1 - np.einsum("nij,nj->ni", rots, p2)
    return [Hypothesis(RigidTransform(q, t), i) for i, (q, t) in enumerate(zip(quats, trans))]


def inlier_masks(rotations: np.ndarray, translations: np.ndarray, src: np.ndarray,
                 dst: np.ndarray, tau: float) -> np.ndarray:
    """``(H, G)`` mask of ``|R_h src_g + t_h - dst_g| < tau``."""
    out = np.empty((len(rotations), len(src)), dtype=bool)
    for s in range(0, len(rotations), _SCORE_BLOCK):
        r = rotations[s:s + _SCORE_BLOCK]
        t = translations[s:s + _SCORE_BLOCK]
        moved = np.einsum("hij,gj->hgi", r, src) + t[:, None, :]
        out[s:s + _SCORE_BLOCK] = np.sum((moved - dst[None]) ** 2, axis=2) < tau * tau
    return out


def _score_many(hyps: list[Hypothesis], gamma: CorrespondenceSet, kp_a, kp_b, tau) -> list[Hypothesis]:
    if not hyps:
        return []
    rots = np.stack([h.transform.matrix for h in hyps])
    trans = np.stack([h.transform.translation for h in hyps])
    masks = inlier_masks(rots, trans, np.asarray(kp_b)[gamma.index_b], np.asarray(kp_a)[gamma.index_a], tau)
    return [replace(h, inlier_count=int(m.sum()), inliers=np.flatnonzero(m)) for h, m in zip(hyps, masks)]


def score_hypothesis(h: Hypothesis, gamma: CorrespondenceSet, kp_a, kp_b, tau: float) -> Hypothesis:
    """Count correspondences ``(i, j)`` with ``|T(p_j) - p_i| < tau``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    return _score_many([h], gamma, kp_a, kp_b, tau)[0]


def select_best(hyps: list[Hypothesis]) -> Hypothesis:
    """Highest inlier count; ties go to the lowest correspondence index."""
    counts = np.array([h.inlier_count for h in hyps])
    src = np.array([h.source_index for h in hyps])
    best = np.lexsort((src, -counts))[0]
    return hyps[best]


def refine_with_inliers(h: Hypothesis, gamma: CorrespondenceSet, kp_a, kp_b, tau: float,
                        max_rounds: int = MAX_REFINE_ROUNDS) -> tuple[Hypothesis, bool]:
    """Kabsch on the inliers, re-score, repeat while the inlier count grows.

    Returns ``(hypothesis, refined)``. A candidate with fewer inliers than the
    current one is never accepted, and fewer than three usable (non-collinear)
    inliers leaves ``h`` untouched with ``refined=False``.
    """
    kp_a = np.asarray(kp_a, dtype=np.float64)
    kp_b = np.asarray(kp_b, dtype=np.float64)
    current = h
    refined = False
    for _ in range(max_rounds):
        if len(current.inliers) < 3:
            break
        sel = gamma.pairs[current.inliers]
        try:
            t = kabsch_align(kp_b[sel[:, 1]], kp_a[sel[:, 0]])
        except DegenerateConfiguration:
            break
        cand = score_hypothesis(Hypothesis(t, current.source_index), gamma, kp_a, kp_b, tau)
        if cand.inlier_count < current.inlier_count:
            break
        grew = cand.inlier_count > current.inlier_count
        current = cand
        refined = True
        if not grew:
            break
    return current, refined


# --------------------------------------------------------------------------- pipelines


def register_direct(kp_a, kp_b, gamma: CorrespondenceSet, rotation_provider: RotationProvider,
                    tau: float, refine: bool = True, max_rounds: int = MAX_REFINE_ROUNDS,
                    min_inliers: int = MIN_INLIERS) -> RegistrationResult:
    """Score every per-correspondence hypothesis, keep the best and refine it.

    ``max_rounds=1`` gives a single Kabsch recomputation.
    """
    if len(gamma) == 0:
        raise EmptyCorrespondences("no correspondences to register")
    t0 = time.perf_counter()
    hyps = generate_hypotheses(gamma, kp_a, kp_b, rotation_provider)
    t1 = time.perf_counter()
    hyps = _score_many(hyps, gamma, kp_a, kp_b, tau)
    best = select_best(hyps)
    refined = False
    if refine:
        best, refined = refine_with_inliers(best, gamma, kp_a, kp_b, tau, max_rounds)
    t2 = time.perf_counter()
    return RegistrationResult(best.transform, best.inlier_count, len(hyps), t1 - t0, t2 - t1,
                              METHOD_DIRECT, refined, best.inliers, hyps, min_inliers)


def register_ransac(kp_a, kp_b, gamma: CorrespondenceSet, iterations: int, tau: float,
                    seed: int = 0, refine: bool = True, max_rounds: int = MAX_REFINE_ROUNDS,
                    min_inliers: int = MIN_INLIERS) -> RegistrationResult:
    """Vanilla RANSAC: 3 random correspondences per iteration, Kabsch, inlier count."""
    if len(gamma) < 3:
        raise TooFewCorrespondences(f"RANSAC needs >= 3 correspondences, got {len(gamma)}")
    kp_a = np.asarray(kp_a, dtype=np.float64)
    kp_b = np.asarray(kp_b, dtype=np.float64)
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    hyps: list[Hypothesis] = []
    for it in range(iterations):
        pick = rng.choice(len(gamma), 3, replace=False)
        sel = gamma.pairs[pick]
        try:
            t = kabsch_align(kp_b[sel[:, 1]], kp_a[sel[:, 0]])
        except DegenerateConfiguration:
            continue
        hyps.append(Hypothesis(t, it))
    t1 = time.perf_counter()
    if not hyps:
        result_t = RigidTransform.identity()
        return RegistrationResult(result_t, 0, 0, t1 - t0, 0.0, METHOD_RANSAC, False,
                                  np.zeros(0, dtype=np.int64), [], min_inliers)
    hyps = _score_many(hyps, gamma, kp_a, kp_b, tau)
    best = select_best(hyps)
    refined = False
    if refine:
        best, refined = refine_with_inliers(best, gamma, kp_a, kp_b, tau, max_rounds)
    t2 = time.perf_counter()
    return RegistrationResult(best.transform, best.inlier_count, len(hyps), t1 - t0, t2 - t1,
                              METHOD_RANSAC, refined, best.inliers, hyps, min_inliers)

"""Train-then-evaluate driver shared by the CLI and the acceptance tests."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from directreg.bench.evaluation import (DEFAULT_T_MAX_FRACTION, EvalReport, PairMatches,
                                        evaluate_fragment_matching, evaluate_registration_set,
                                        hypothesis_deviations)
from directreg.bench.synthetic import SceneSpec, scene_diameter
from directreg.features import FragmentFeatures, describe_fragment
from directreg.matching import (SOURCE_PC, SOURCE_PPF, STRATEGY_CLOSEST, STRATEGY_MUTUAL,
                                CorrespondenceSet, build_correspondences)
from directreg.models import ModelConfig, PoseModels
from directreg.registration import (METHOD_DIRECT, METHOD_RANSAC, NetworkRotations,
                                    RegistrationResult, register_direct, register_ransac)
from directreg.training import PairBatch, TrainConfig, sample_training_pairs, train

STRATEGIES = ("mutual-1", "mutual-2", "mutual-3", "mutual-4", "closest")


def parse_strategy(name: str) -> tuple[str, int]:
    """``"mutual-3"`` → ``("mutual-k", 3)``; ``"closest"`` → ``("closest", 1)``."""
    if name == STRATEGY_CLOSEST:
        return STRATEGY_CLOSEST, 1
    head, _, k = name.partition("-")
    if head == "mutual" and k.isdigit() and int(k) >= 1:
        return STRATEGY_MUTUAL, int(k)
    raise ValueError(f"unknown correspondence strategy {name!r}")


@dataclass
class BenchConfig:
    """Geometry scales are absolute except where named ``*_fraction``/``*_factor``."""

    voxel: float = 0.1
    diameter: float = scene_diameter(SceneSpec())
    radius_fraction: float = 0.15
    tau_factor: float = 2.5
    r_inlier_factor: float = 1.0
    r_match_factor: float = 0.5
    ransac_iterations: int = 1000
    theta_max: float = math.radians(15.0)
    t_max_fraction: float = DEFAULT_T_MAX_FRACTION
    register_strategy: str = "mutual-1"
    strategies: tuple[str, ...] = STRATEGIES
    source: str = SOURCE_PPF
    seed: int = 0

    @property
    def radius(self) -> float:
        return self.radius_fraction * self.diameter

    @property
    def tau(self) -> float:
        return self.tau_factor * self.voxel

    @property
    def r_inlier(self) -> float:
        return self.r_inlier_factor * self.voxel

    @property
    def r_match(self) -> float:
        return self.r_match_factor * self.voxel

    @property
    def t_max(self) -> float:
        return self.t_max_fraction * self.diameter


@dataclass
class BenchResult:
    matching: dict[str, EvalReport]
    counts: dict[str, list[int]]
    registration: dict[str, EvalReport] = field(default_factory=dict)
    hypothesis_angles: dict[str, np.ndarray] = field(default_factory=dict)
    hypothesis_translations: dict[str, np.ndarray] = field(default_factory=dict)

    def median_angular_deviation(self, method: str) -> float:
        """Median over every hypothesis of every pair (radians)."""
        return float(np.median(self.hypothesis_angles[method]))

    def summary_rows(self) -> list[list[str]]:
        rows = [["section", "name", "matching_recall", "registration_recall",
                 "registration_precision", "mean_count", "median_hyp_angle_deg"]]
        for name, rep in self.matching.items():
            rows.append(["matching", name, f"{rep.matching_recall:.4f}", "", "",
                         f"{np.mean(self.counts[name]):.1f}", ""])
        for method, rep in self.registration.items():
            ang = (f"{math.degrees(self.median_angular_deviation(method)):.2f}"
                   if method in self.hypothesis_angles else "")
            rows.append(["registration", method, "", f"{rep.registration_recall:.4f}",
                         f"{rep.registration_precision:.4f}", "", ang])
        return rows

    def summary_table(self) -> str:
        return format_table(self.summary_rows())

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, rep in self.matching.items():
            rep.to_csv(out / f"matching_{name}.csv")
        for method, rep in self.registration.items():
            rep.to_csv(out / f"registration_{method}.csv")
        with open(out / "summary.csv", "w", newline="") as fh:
            csv.writer(fh).writerows(self.summary_rows())


def format_table(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


# --------------------------------------------------------------------------- training


def train_models(train_pairs: Sequence, train_cfg: TrainConfig, bench_cfg: BenchConfig,
                 per_pair: int = 8, model_cfg: Optional[ModelConfig] = None,
                 log_path: Optional[Path] = None, progress=None) -> PoseModels:
    """Sample matched patch pairs from ``train_pairs`` and train fresh models."""
    if model_cfg is None:
        model_cfg = ModelConfig(latent_dim=train_cfg.latent_dim, n_patch=train_cfg.n_patch,
                                seed=train_cfg.seed)
    samples = sample_training_pairs(train_pairs, bench_cfg.r_match, per_pair, train_cfg.seed,
                                    bench_cfg.voxel, bench_cfg.radius, model_cfg.n_patch)
    models = PoseModels.build(model_cfg)
    train(models, PairBatch.from_samples(samples), train_cfg, log_path, progress)
    return models


# --------------------------------------------------------------------------- evaluation


def describe_pairs(models: PoseModels, pairs: Sequence, cfg: BenchConfig
                   ) -> list[tuple[FragmentFeatures, FragmentFeatures]]:
    return [(describe_fragment(models, p.cloud_a, cfg.voxel, cfg.radius, cfg.seed),
             describe_fragment(models, p.cloud_b, cfg.voxel, cfg.radius, cfg.seed))
            for p in pairs]


def correspondences_for(fa: FragmentFeatures, fb: FragmentFeatures, name: str,
                        source: str = SOURCE_PPF) -> CorrespondenceSet:
    strategy, k = parse_strategy(name)
    src = SOURCE_PC if source in ("pc", SOURCE_PC) else SOURCE_PPF
    return build_correspondences(fa.descriptors(src), fb.descriptors(src), strategy, k, src)


def register_pair(method: str, models: Optional[PoseModels], fa: FragmentFeatures,
                  fb: FragmentFeatures, gamma: CorrespondenceSet, cfg: BenchConfig,
                  rotation_provider=None) -> RegistrationResult:
    if method == METHOD_DIRECT:
        provider = rotation_provider or NetworkRotations(models.relative, fa.pose, fb.pose)
        return register_direct(fa.keypoints, fb.keypoints, gamma, provider, cfg.tau)
    if method == METHOD_RANSAC:
        return register_ransac(fa.keypoints, fb.keypoints, gamma, cfg.ransac_iterations, cfg.tau,
                               seed=cfg.seed)
    raise ValueError(f"unknown registration method {method!r}")


def _failed_result(method: str) -> RegistrationResult:
    from directreg.core3d import RigidTransform
    return RegistrationResult(RigidTransform.identity(), 0, 0, 0.0, 0.0, method, False,
                              np.zeros(0, dtype=np.int64))


def run_benchmark(models: PoseModels, pairs: Sequence, cfg: BenchConfig,
                  methods: Sequence[str] = (METHOD_DIRECT, METHOD_RANSAC),
                  features: Optional[list] = None,
                  progress: Optional[Callable[[int, str], None]] = None) -> BenchResult:
    """Matching recall per strategy, then registration of ``cfg.register_strategy`` per method.

    A pair whose correspondence set is too small for a method counts as an
    unregistered, unaccepted attempt.
    """
    if features is None:
        features = describe_pairs(models, pairs, cfg)
    gammas = {name: [correspondences_for(fa, fb, name, cfg.source) for fa, fb in features]
              for name in cfg.strategies}
    if cfg.register_strategy not in gammas:
        gammas[cfg.register_strategy] = [correspondences_for(fa, fb, cfg.register_strategy, cfg.source)
                                         for fa, fb in features]
    matching = {}
    counts = {}
    for name in cfg.strategies:
        items = [PairMatches(p.pair_id, fa.keypoints, fb.keypoints, g, p.gt_transform)
                 for p, (fa, fb), g in zip(pairs, features, gammas[name])]
        matching[name] = evaluate_fragment_matching(items, cfg.r_inlier)
        counts[name] = [len(g) for g in gammas[name]]
    result = BenchResult(matching, counts)

    for method in methods:
        results, angles, trans = [], [], []
        for i, (p, (fa, fb), g) in enumerate(zip(pairs, features, gammas[cfg.register_strategy])):
            min_needed = 1 if method == METHOD_DIRECT else 3
            if len(g) < min_needed:
                res = _failed_result(method)
            else:
                res = register_pair(method, models, fa, fb, g, cfg)
                if res.hypotheses:
                    a, t = hypothesis_deviations(res.hypotheses, p.gt_transform)
                    angles.append(a)
                    trans.append(t)
            results.append(res)
            if progress is not None:
                progress(i, method)
        result.registration[method] = evaluate_registration_set(pairs, results, cfg.theta_max, cfg.t_max)
        result.hypothesis_angles[method] = np.concatenate(angles) if angles else np.zeros(0)
        result.hypothesis_translations[method] = np.concatenate(trans) if trans else np.zeros(0)
    return result


# --------------------------------------------------------------------------- ablation

ABLATIONS: dict[str, dict[str, bool]] = {
    "All": {},
    "No-Rec": {"use_rec": False},
    "No-Pose": {"use_pose": False},
    "No-Feat": {"use_feat": False},
}


@dataclass
class AblationRow:
    name: str
    matching_recall: float
    n_matched: int
    registration_recall: Optional[float]
    final_losses: tuple[float, float, float, float]
    seconds: float


def run_ablation(train_pairs: Sequence, test_pairs: Sequence, train_cfg: TrainConfig,
                 bench_cfg: BenchConfig, per_pair: int = 8, names: Sequence[str] = tuple(ABLATIONS),
                 register: bool = False, progress=None) -> list[AblationRow]:
    """Train one model per loss configuration and compare fragment-matching recall.

    Matching recall is measured with ``bench_cfg.register_strategy``; with
    ``register`` the direct method is also run on it.
    """
    cfg = replace(bench_cfg, strategies=(bench_cfg.register_strategy,))
    rows = []
    for name in names:
        t0 = time.perf_counter()
        tcfg = replace(train_cfg, **ABLATIONS[name])
        history: list = []
        models = train_models(train_pairs, tcfg, bench_cfg, per_pair,
                              progress=lambda e, l: history.append(l))
        res = run_benchmark(models, test_pairs, cfg, methods=(METHOD_DIRECT,) if register else ())
        rep = res.matching[bench_cfg.register_strategy]
        rows.append(AblationRow(
            name, rep.matching_recall, rep.n_matched,
            res.registration[METHOD_DIRECT].registration_recall if register else None,
            tuple(history[-1].as_row()) if history else (0.0,) * 4,
            time.perf_counter() - t0))
        if progress is not None:
            progress(rows[-1])
    return rows


def ablation_table(rows: Sequence[AblationRow]) -> str:
    table = [["config", "matching_recall", "matched", "registration_recall", "final_total_loss"]]
    for r in rows:
        table.append([r.name, f"{r.matching_recall:.4f}", str(r.n_matched),
                      "" if r.registration_recall is None else f"{r.registration_recall:.4f}",
                      f"{r.final_losses[3]:.4f}"])
    return format_table(table)

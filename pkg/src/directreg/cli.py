"""Command-line entry point: ``directreg <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

from directreg.bench.dataset import find_pair, load_dataset, load_info, row_transform, save_dataset
from directreg.bench.io import load_point_cloud
from directreg.bench.runner import (ABLATIONS, STRATEGIES, BenchConfig, ablation_table,
                                    parse_strategy, run_ablation, run_benchmark, train_models)
from directreg.bench.synthetic import DatasetSpec, SceneSpec, generate_dataset, scene_diameter
from directreg.core3d import transform_error
from directreg.errors import DirectRegError
from directreg.features import FragmentFeatures, describe_fragment
from directreg.matching import (SOURCE_PC, SOURCE_PPF, build_correspondences,
                                load_correspondences_csv, save_correspondences_csv)
from directreg.models import PoseModels
from directreg.registration import (METHOD_DIRECT, METHOD_RANSAC, NetworkRotations,
                                    OracleRotations, register_direct, register_ransac)
from directreg.tensornet import load_checkpoint, save_checkpoint
from directreg.training import TrainConfig


def _bench_config(args, info: dict | None = None) -> BenchConfig:
    cfg = BenchConfig()
    if info and "diameter" in info:
        cfg = replace(cfg, diameter=float(info["diameter"]))
    if getattr(args, "voxel", None):
        cfg = replace(cfg, voxel=args.voxel)
    if getattr(args, "tau", None):
        cfg = replace(cfg, tau_factor=args.tau / cfg.voxel)
    if getattr(args, "iterations", None):
        cfg = replace(cfg, ransac_iterations=args.iterations)
    return cfg


def _load_models(path) -> tuple[PoseModels, dict]:
    store, meta = load_checkpoint(path)
    return PoseModels.from_checkpoint(store, meta), meta


# --------------------------------------------------------------------------- subcommands


def cmd_gen(args) -> int:
    scene = SceneSpec()
    spec = DatasetSpec(n_train=args.n_train, n_test=args.n_test,
                       overlap_range=(args.overlap_min, args.overlap_max),
                       sigma_fraction=args.sigma_fraction, scene=scene, seed=args.seed)
    splits = generate_dataset(spec)
    info = {"diameter": scene_diameter(scene), "seed": args.seed,
            "overlap_range": list(spec.overlap_range), "sigma_fraction": spec.sigma_fraction}
    manifest = save_dataset(splits, args.out, info)
    print(f"wrote {sum(map(len, splits.values()))} pairs to {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    info = load_info(args.data)
    bench = _bench_config(args, info)
    pairs = load_dataset(args.data, splits=[args.split])[args.split]

    def progress(epoch, losses):
        print(f"epoch {epoch}: " + " ".join(f"{k}={v:.5f}" for k, v in
                                             zip(("l_rec", "l_pose", "l_feat", "total"), losses.as_row())),
              flush=True)

    models = train_models(pairs, cfg, bench, args.per_pair, log_path=args.log, progress=progress)
    meta = models.metadata()
    meta["geometry"] = {"voxel": bench.voxel, "radius": bench.radius, "diameter": bench.diameter}
    meta["train"] = asdict(cfg)
    save_checkpoint(args.out, models.store, meta)
    print(f"checkpoint written to {args.out}")
    return 0


def _geometry(meta: dict, args) -> tuple[float, float]:
    geo = meta.get("geometry", {})
    voxel = args.voxel or geo.get("voxel", BenchConfig.voxel)
    radius = args.radius or geo.get("radius", BenchConfig().radius)
    return voxel, radius


def cmd_describe(args) -> int:
    models, meta = _load_models(args.checkpoint)
    voxel, radius = _geometry(meta, args)
    feats = describe_fragment(models, load_point_cloud(args.cloud), voxel, radius, args.seed)
    feats.save(args.out)
    print(f"{len(feats)} keypoints described -> {args.out}")
    return 0


def cmd_match(args) -> int:
    fa = FragmentFeatures.load(args.desc_a)
    fb = FragmentFeatures.load(args.desc_b)
    source = SOURCE_PC if args.source == "pc" else SOURCE_PPF
    gamma = build_correspondences(fa.descriptors(source), fb.descriptors(source),
                                  args.strategy, args.k, source)
    save_correspondences_csv(gamma, args.out)
    print(f"{len(gamma)} correspondences -> {args.out}")
    return 0


def cmd_register(args) -> int:
    fa = FragmentFeatures.load(args.desc_a)
    fb = FragmentFeatures.load(args.desc_b)
    if args.correspondences:
        gamma = load_correspondences_csv(args.correspondences)
    else:
        gamma = build_correspondences(fa.ppf, fb.ppf)
    gt = None
    if args.data and args.pair_id:
        gt = row_transform(find_pair(args.data, args.pair_id))
    if args.method == METHOD_DIRECT:
        if args.oracle_rotations:
            if gt is None:
                raise SystemExit("--oracle-rotations needs --data and --pair-id for the ground truth")
            provider = OracleRotations(gt.rotation)
        else:
            if not args.checkpoint:
                raise SystemExit("direct registration needs --checkpoint (or --oracle-rotations)")
            models, _ = _load_models(args.checkpoint)
            provider = NetworkRotations(models.relative, fa.pose, fb.pose)
        res = register_direct(fa.keypoints, fb.keypoints, gamma, provider, args.tau)
    else:
        res = register_ransac(fa.keypoints, fb.keypoints, gamma, args.iterations, args.tau, seed=args.seed)
    record = {"pair_id": args.pair_id, "n_correspondences": len(gamma), **res.to_record()}
    if gt is not None:
        rot_err, trans_err = transform_error(res.transform, gt)
        record["rotation_error"] = rot_err
        record["translation_error"] = trans_err
    line = json.dumps(record)
    if args.out:
        with open(args.out, "a") as fh:
            fh.write(line + "\n")
    print(line)
    return 0


def cmd_bench(args) -> int:
    models, meta = _load_models(args.checkpoint)
    info = load_info(args.data)
    cfg = _bench_config(args, info)
    geo = meta.get("geometry", {})
    if "voxel" in geo and not args.voxel:
        cfg = replace(cfg, voxel=geo["voxel"])
    if "radius" in geo:
        cfg = replace(cfg, radius_fraction=geo["radius"] / cfg.diameter)
    strategies = tuple(args.strategies.split(",")) if args.strategies else STRATEGIES
    for s in strategies:
        parse_strategy(s)
    cfg = replace(cfg, strategies=strategies, source=args.source)
    pairs = load_dataset(args.data, splits=[args.split])[args.split]
    result = run_benchmark(models, pairs, cfg, methods=tuple(args.methods.split(",")))
    result.write(args.out)
    print(result.summary_table())
    return 0


def cmd_ablate(args) -> int:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    info = load_info(args.data)
    bench = _bench_config(args, info)
    data = load_dataset(args.data)
    names = args.configs.split(",") if args.configs else list(ABLATIONS)
    rows = run_ablation(data["train"], data["test"], cfg, bench, args.per_pair, names,
                        register=args.register,
                        progress=lambda r: print(f"{r.name}: matching recall {r.matching_recall:.4f}",
                                                 flush=True))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "matching_recall", "n_matched", "registration_recall",
                    "l_rec", "l_pose", "l_feat", "total", "seconds"])
        for r in rows:
            w.writerow([r.name, r.matching_recall, r.n_matched,
                        "" if r.registration_recall is None else r.registration_recall,
                        *r.final_losses, f"{r.seconds:.1f}"])
    print(ablation_table(rows))
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="directreg", description="Direct pairwise point-cloud registration.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic train/test dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=50)
    g.add_argument("--n-test", type=int, default=50)
    g.add_argument("--overlap-min", type=float, default=DatasetSpec.overlap_range[0])
    g.add_argument("--overlap-max", type=float, default=DatasetSpec.overlap_range[1])
    g.add_argument("--sigma-fraction", type=float, default=DatasetSpec.sigma_fraction)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the auto-encoders and RelativeNet")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="key = value file with TrainConfig fields")
    t.add_argument("--out", required=True, help="checkpoint path (.npz)")
    t.add_argument("--log", help="per-epoch loss CSV")
    t.add_argument("--split", default="train")
    t.add_argument("--per-pair", type=int, default=8, help="patch pairs sampled per fragment pair")
    t.add_argument("--epochs", type=int)
    t.add_argument("--voxel", type=float)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("describe", help="keypoints and descriptors of one cloud")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--cloud", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--voxel", type=float)
    d.add_argument("--radius", type=float)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_describe)

    m = sub.add_parser("match", help="correspondences between two descriptor files")
    m.add_argument("desc_a")
    m.add_argument("desc_b")
    m.add_argument("--out", required=True)
    m.add_argument("--strategy", choices=["mutual-k", "closest"], default="mutual-k")
    m.add_argument("--k", type=int, default=1)
    m.add_argument("--source", choices=["ppf", "pc"], default="ppf")
    m.set_defaults(func=cmd_match)

    r = sub.add_parser("register", help="register fragment b onto fragment a")
    r.add_argument("desc_a")
    r.add_argument("desc_b")
    r.add_argument("--correspondences", help="CSV from 'match'; mutual-1 on PPF latents otherwise")
    r.add_argument("--checkpoint")
    r.add_argument("--method", choices=[METHOD_DIRECT, METHOD_RANSAC], default=METHOD_DIRECT)
    r.add_argument("--tau", type=float, default=BenchConfig().tau)
    r.add_argument("--iterations", type=int, default=1000)
    r.add_argument("--oracle-rotations", action="store_true",
                   help="use the ground-truth rotation for every hypothesis (testing aid)")
    r.add_argument("--data", help="dataset directory holding the ground truth")
    r.add_argument("--pair-id")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", help="append the JSON record to this file")
    r.set_defaults(func=cmd_register)

    b = sub.add_parser("bench", help="evaluate a checkpoint on a dataset split")
    b.add_argument("--data", required=True)
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--out", required=True, help="output directory for report CSVs")
    b.add_argument("--split", default="test")
    b.add_argument("--strategies", help=f"comma list, default {','.join(STRATEGIES)}")
    b.add_argument("--methods", default=f"{METHOD_DIRECT},{METHOD_RANSAC}")
    b.add_argument("--source", choices=["ppf", "pc"], default="ppf")
    b.add_argument("--iterations", type=int)
    b.add_argument("--tau", type=float)
    b.add_argument("--voxel", type=float)
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("ablate", help="train and evaluate each loss configuration")
    a.add_argument("--data", required=True)
    a.add_argument("--config")
    a.add_argument("--out", required=True, help="ablation CSV")
    a.add_argument("--configs", help=f"comma list of {','.join(ABLATIONS)}")
    a.add_argument("--per-pair", type=int, default=8)
    a.add_argument("--epochs", type=int)
    a.add_argument("--register", action="store_true", help="also report direct registration recall")
    a.add_argument("--voxel", type=float)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DirectRegError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""On-disk datasets: one PLY per fragment plus a manifest CSV of ground-truth poses.

Manifest columns, in order::

    pair_id, split, cloud_a, cloud_b, qw, qx, qy, qz, tx, ty, tz, overlap, sigma

``cloud_a``/``cloud_b`` are paths relative to the manifest, and the pose maps
cloud b into cloud a's frame. ``dataset.json`` next to the manifest stores the
scene diameter used to derive the geometric scales.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

from directreg.bench.io import load_point_cloud, save_point_cloud
from directreg.bench.synthetic import FragmentPair
from directreg.core3d import RigidTransform
from directreg.errors import ParseError

MANIFEST = "manifest.csv"
INFO = "dataset.json"
MANIFEST_COLUMNS = ("pair_id", "split", "cloud_a", "cloud_b", "qw", "qx", "qy", "qz",
                    "tx", "ty", "tz", "overlap", "sigma")


def save_dataset(splits: dict[str, list[FragmentPair]], out_dir, info: dict) -> Path:
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    with open(out / MANIFEST, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for split, pairs in splits.items():
            for p in pairs:
                rel_a = f"clouds/{p.pair_id}_a.ply"
                rel_b = f"clouds/{p.pair_id}_b.ply"
                save_point_cloud(p.cloud_a, out / rel_a)
                save_point_cloud(p.cloud_b, out / rel_b)
                pose = [repr(float(v)) for v in p.gt_transform.as_vector()]
                w.writerow([p.pair_id, split, rel_a, rel_b, *pose, repr(p.overlap), repr(p.sigma)])
    (out / INFO).write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return out / MANIFEST


def read_manifest(path) -> list[dict]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ParseError(f"{path}: manifest lacks columns {missing}", line=1)
        return list(reader)


def row_transform(row: dict) -> RigidTransform:
    return RigidTransform.from_vector([float(row[k]) for k in ("qw", "qx", "qy", "qz", "tx", "ty", "tz")])


def load_dataset(data_dir, splits=None) -> dict[str, list[FragmentPair]]:
    root = Path(data_dir)
    out: dict[str, list[FragmentPair]] = {}
    for row in read_manifest(root / MANIFEST):
        if splits is not None and row["split"] not in splits:
            continue
        out.setdefault(row["split"], []).append(FragmentPair(
            cloud_a=load_point_cloud(root / row["cloud_a"]),
            cloud_b=load_point_cloud(root / row["cloud_b"]),
            gt_transform=row_transform(row),
            overlap=float(row["overlap"]),
            sigma=float(row["sigma"]),
            pair_id=row["pair_id"],
        ))
    return out


def load_info(data_dir) -> dict:
    path = Path(data_dir) / INFO
    return json.loads(path.read_text()) if path.exists() else {}


def find_pair(data_dir, pair_id: str) -> dict:
    for row in read_manifest(Path(data_dir) / MANIFEST):
        if row["pair_id"] == pair_id:
            return row
    raise KeyError(f"pair {pair_id!r} not in manifest")


def gt_of(data_dir, pair_id: str) -> RigidTransform:
    return row_transform(find_pair(data_dir, pair_id))


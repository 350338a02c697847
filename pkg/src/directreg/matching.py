"""Nearest-neighbour search in descriptor space and correspondence strategies."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from directreg.errors import EmptyTarget

SOURCE_PPF = "ppf-invariant"
SOURCE_PC = "pc-variant"
STRATEGY_MUTUAL = "mutual-k"
STRATEGY_CLOSEST = "closest"


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Rows of ``(index_a, index_b)`` with their descriptor distances."""

    pairs: np.ndarray          # (n, 2) int
    distances: np.ndarray      # (n,)
    source: str = SOURCE_PPF
    strategy: str = STRATEGY_MUTUAL
    k: int = 1

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "distances", np.asarray(self.distances, dtype=np.float64).reshape(-1))

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def index_a(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def index_b(self) -> np.ndarray:
        return self.pairs[:, 1]

    def as_set(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in self.pairs}

    @classmethod
    def from_pairs(cls, pairs, distances=None, **kw) -> "CorrespondenceSet":
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if distances is None:
            distances = np.zeros(len(pairs))
        return cls(pairs, distances, **kw)


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, np.ndarray) and x.ndim == 2:
        return x.astype(np.float64, copy=False)
    rows = [np.asarray(getattr(v, "vector", v), dtype=np.float64) for v in x]
    return np.stack(rows) if rows else np.zeros((0, 0))


def _l2(query: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean distance; the single formula both search paths share."""
    return np.sqrt(np.sum((query - target) ** 2, axis=-1))


def brute_force_knn(query, target, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Reference k-NN by a full scan; ties go to the lower target index."""
    q = _as_matrix(query)
    t = _as_matrix(target)
    if len(t) == 0:
        raise EmptyTarget("empty target set")
    k = min(k, len(t))
    idx_parts, d_parts = [], []
    for start in range(0, len(q), 128):
        d = _l2(q[start:start + 128, None, :], t[None, :, :])
        idx = np.argsort(d, axis=1, kind="stable")[:, :k]
        idx_parts.append(idx)
        d_parts.append(np.take_along_axis(d, idx, axis=1))
    if not idx_parts:
        return np.zeros((0, k), dtype=np.int64), np.zeros((0, k))
    return np.concatenate(idx_parts), np.concatenate(d_parts)


def feature_nn_search(query, target, k: int, method: str = "kdtree") -> tuple[np.ndarray, np.ndarray]:
    """Exact ``k`` nearest targets (L2) for every query row.

    Returns ``(indices, distances)`` of shape ``(n_query, min(k, n_target))``,
    sorted by distance with ties broken by lower index. ``method="brute"``
    runs the full scan used as the oracle.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    q = _as_matrix(query)
    t = _as_matrix(target)
    if len(t) == 0:
        raise EmptyTarget("empty target set")
    if method == "brute":
        return brute_force_knn(q, t, k)
    k_eff = min(k, len(t))
    if len(q) == 0:
        return np.zeros((0, k_eff), dtype=np.int64), np.zeros((0, k_eff))
    # Ask for one extra neighbour so a tie at the k-th place can be resolved by index.
    k_probe = min(k_eff + 1, len(t))
    _, idx = cKDTree(t).query(q, k=k_probe)
    idx = np.asarray(idx, dtype=np.int64).reshape(len(q), k_probe)
    d = _l2(q[:, None, :], t[idx])
    order = np.lexsort((idx, d), axis=1)
    idx = np.take_along_axis(idx, order, axis=1)[:, :k_eff]
    d = np.take_along_axis(d, order, axis=1)[:, :k_eff]
    return idx, d


def mutual_k_correspondences(feat_a, feat_b, k: int, source: str = SOURCE_PPF,
                             method: str = "kdtree") -> CorrespondenceSet:
    """Keep ``(i, j)`` iff ``j`` is among the k nearest of ``i`` in b and vice versa."""
    fa = _as_matrix(feat_a)
    fb = _as_matrix(feat_b)
    if len(fa) == 0 or len(fb) == 0:
        raise EmptyTarget("both descriptor sets must be non-empty")
    nn_ab, d_ab = feature_nn_search(fa, fb, k, method)
    nn_ba, _ = feature_nn_search(fb, fa, k, method)
    back = np.zeros((len(fb), len(fa)), dtype=bool)
    back[np.repeat(np.arange(len(fb)), nn_ba.shape[1]), nn_ba.reshape(-1)] = True
    rows_i = np.repeat(np.arange(len(fa)), nn_ab.shape[1])
    rows_j = nn_ab.reshape(-1)
    keep = back[rows_j, rows_i]
    pairs = np.stack([rows_i[keep], rows_j[keep]], axis=1)
    return CorrespondenceSet(pairs, d_ab.reshape(-1)[keep], source, STRATEGY_MUTUAL, k)


def closest_correspondences(feat_a, feat_b, source: str = SOURCE_PPF,
                            method: str = "kdtree") -> CorrespondenceSet:
    """Union of every a-descriptor's nearest b and every b-descriptor's nearest a."""
    fa = _as_matrix(feat_a)
    fb = _as_matrix(feat_b)
    if len(fa) == 0 or len(fb) == 0:
        raise EmptyTarget("both descriptor sets must be non-empty")
    nn_ab, d_ab = feature_nn_search(fa, fb, 1, method)
    nn_ba, d_ba = feature_nn_search(fb, fa, 1, method)
    pairs = np.concatenate([
        np.stack([np.arange(len(fa)), nn_ab[:, 0]], axis=1),
        np.stack([nn_ba[:, 0], np.arange(len(fb))], axis=1),
    ])
    dist = np.concatenate([d_ab[:, 0], d_ba[:, 0]])
    _, first = np.unique(pairs, axis=0, return_index=True)
    first = np.sort(first)
    return CorrespondenceSet(pairs[first], dist[first], source, STRATEGY_CLOSEST, 1)


def build_correspondences(feat_a, feat_b, strategy: str = STRATEGY_MUTUAL, k: int = 1,
                          source: str = SOURCE_PPF) -> CorrespondenceSet:
    if strategy == STRATEGY_MUTUAL:
        return mutual_k_correspondences(feat_a, feat_b, k, source)
    if strategy == STRATEGY_CLOSEST:
        return closest_correspondences(feat_a, feat_b, source)
    raise ValueError(f"unknown strategy {strategy!r}")


def save_correspondences_csv(gamma: CorrespondenceSet, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index_a", "index_b", "distance"])
        for (i, j), d in zip(gamma.pairs, gamma.distances):
            w.writerow([int(i), int(j), repr(float(d))])


def load_correspondences_csv(path, source: str = SOURCE_PPF, strategy: str = STRATEGY_MUTUAL,
                             k: int = 1) -> CorrespondenceSet:
    pairs, dist = [], []
    with open(Path(path), newline="") as fh:
        for row in csv.DictReader(fh):
            pairs.append((int(row["index_a"]), int(row["index_b"])))
            dist.append(float(row["distance"]))
    return CorrespondenceSet(np.array(pairs, dtype=np.int64).reshape(-1, 2), np.array(dist),
                             source, strategy, k)

"""Exhaustive descriptor search and place-recognition metrics.

A retrieval is correct when the returned database pose lies within
``radius`` (9 m) of the query pose.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from r2l.net import encode
from r2l.worldgen import POSITIVE_RADIUS

DESC_MAGIC = b"RLPRDESC"
DESC_VERSION = 1
_DESC_HEADER = struct.Struct("<8sHII")

DEFAULT_KS = (1, 5, 10, 20)


class ProtocolError(ValueError):
    """A query has no database entry within the success radius."""


@dataclass
class DescriptorIndex:
    ids: np.ndarray  # (n,) uint64
    matrix: np.ndarray  # (n, dim) float32, unit-norm rows
    poses: np.ndarray  # (n, 3) float32

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.ids)


def build_index(descriptors, poses, ids) -> DescriptorIndex:
    mat = np.ascontiguousarray(descriptors, dtype=np.float32)
    if mat.ndim != 2:
        raise ValueError("descriptors must be a 2D array")
    ids = np.asarray(ids, dtype=np.uint64)
    poses = np.asarray(poses, dtype=np.float32).reshape(len(mat), -1)
    if poses.shape[1] == 2:
        poses = np.concatenate([poses, np.zeros((len(mat), 1), np.float32)], axis=1)
    if len(ids) != len(mat) or len(poses) != len(mat):
        raise ValueError("descriptors, poses and ids differ in length")
    if len(np.unique(ids)) != len(ids):
        raise ValueError("duplicate ids in index")
    norms = np.linalg.norm(mat.astype(np.float64), axis=1)
    if len(mat) and np.abs(norms - 1.0).max() > 1e-5:
        raise ValueError("index rows must be unit-norm")
    return DescriptorIndex(ids, mat, poses)


def similarities(index: DescriptorIndex, queries: np.ndarray) -> np.ndarray:
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[1] != index.dim:
        raise ValueError(f"query dimension {q.shape[1]} != index dimension {index.dim}")
    return q @ index.matrix.astype(np.float64).T


def ranking(index: DescriptorIndex, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row positions of the database sorted per query (similarity desc, id asc) and the similarities."""
    sims = similarities(index, queries)
    ids = np.broadcast_to(index.ids, sims.shape)
    order = np.lexsort((ids, -sims), axis=-1)
    return order, sims


def query_topk(index: DescriptorIndex, q: np.ndarray, K: int) -> list[tuple[int, float]]:
    if K < 1:
        raise ValueError("K must be >= 1")
    order, sims = ranking(index, q)
    top = order[0, :K]
    return [(int(index.ids[j]), float(sims[0, j])) for j in top]


def _within(index: DescriptorIndex, query_poses: np.ndarray, radius: float) -> np.ndarray:
    qp = np.asarray(query_poses, dtype=np.float64)[:, :2]
    dp = index.poses[:, :2].astype(np.float64)
    return np.linalg.norm(qp[:, None, :] - dp[None, :, :], axis=-1) < radius


def first_hit_ranks(index: DescriptorIndex, queries: np.ndarray, query_poses: np.ndarray,
                    radius: float = POSITIVE_RADIUS) -> np.ndarray:
    """1-based rank of the first in-radius database entry for each query."""
    near = _within(index, query_poses, radius)
    if not near.any(axis=1).all():
        bad = int(np.flatnonzero(~near.any(axis=1))[0])
        raise ProtocolError(f"query {bad} has no database entry within {radius} m")
    order, _ = ranking(index, queries)
    hits = np.take_along_axis(near, order, axis=1)
    return hits.argmax(axis=1) + 1


def _percent(hits: np.ndarray) -> float:
    return 100.0 * int(np.sum(hits)) / len(hits)


def recall_at_k(index: DescriptorIndex, queries: np.ndarray, query_poses: np.ndarray, K: int,
                radius: float = POSITIVE_RADIUS) -> float:
    ranks = first_hit_ranks(index, queries, query_poses, radius)
    return _percent(ranks <= K)


def top1_outcomes(index: DescriptorIndex, queries: np.ndarray, query_poses: np.ndarray,
                  radius: float = POSITIVE_RADIUS) -> tuple[np.ndarray, np.ndarray]:
    """Top-1 similarity and correctness per query."""
    near = _within(index, query_poses, radius)
    if not near.any(axis=1).all():
        raise ProtocolError("a query has no database entry within the success radius")
    order, sims = ranking(index, queries)
    top = order[:, 0]
    rows = np.arange(len(top))
    return sims[rows, top], near[rows, top]


def f1_at_threshold(top_sim: np.ndarray, correct: np.ndarray, threshold: float) -> float:
    """F1 when top-1 matches with similarity >= threshold are accepted.

    Every query has a true match in the database, so each rejected query is
    a false negative.
    """
    accept = top_sim >= threshold
    tp = int(np.sum(accept & correct))
    fp = int(np.sum(accept & ~correct))
    fn = int(np.sum(~accept))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def max_f1(index: DescriptorIndex, queries: np.ndarray, query_poses: np.ndarray,
           radius: float = POSITIVE_RADIUS) -> float:
    top_sim, correct = top1_outcomes(index, queries, query_poses, radius)
    return max_f1_from_outcomes(top_sim, correct)


def max_f1_from_outcomes(top_sim: np.ndarray, correct: np.ndarray) -> float:
    """Maximum F1 over thresholds at the observed top-1 similarities."""
    top_sim = np.asarray(top_sim, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    if len(top_sim) == 0:
        return 0.0
    # accepting the k most similar queries for every k covers all observed thresholds
    order = np.argsort(-top_sim, kind="stable")
    s, c = top_sim[order], correct[order]
    n = len(s)
    tp = np.cumsum(c)
    fp = np.cumsum(~c)
    # ties: a threshold accepts every query with equal similarity at once
    last = np.r_[s[1:] != s[:-1], True]
    tp, fp = tp[last], fp[last]
    fn = n - (tp + fp)
    f1 = 2 * tp / (2 * tp + fp + fn)
    return float(f1.max())


@dataclass
class MetricsReport:
    recall: dict[int, float]
    max_f1: float
    n_queries: int
    radius: float = POSITIVE_RADIUS
    mode: str = "cross"
    extras: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {f"AR@{k}": v for k, v in sorted(self.recall.items())}
        out["maxF1"] = self.max_f1
        return out


def metrics(index: DescriptorIndex, queries: np.ndarray, query_poses: np.ndarray,
            Ks=DEFAULT_KS, radius: float = POSITIVE_RADIUS, mode: str = "cross") -> MetricsReport:
    ranks = first_hit_ranks(index, queries, query_poses, radius)
    top_sim, correct = top1_outcomes(index, queries, query_poses, radius)
    return MetricsReport(
        recall={int(k): _percent(ranks <= k) for k in Ks},
        max_f1=max_f1_from_outcomes(top_sim, correct),
        n_queries=len(ranks),
        radius=radius,
        mode=mode,
    )


# ---------------------------------------------------------------------------
# Store files
# ---------------------------------------------------------------------------


def encode_store(index: DescriptorIndex) -> bytes:
    return b"".join([
        _DESC_HEADER.pack(DESC_MAGIC, DESC_VERSION, len(index), index.dim),
        np.ascontiguousarray(index.ids, dtype="<u8").tobytes(),
        np.ascontiguousarray(index.poses, dtype="<f4").tobytes(),
        np.ascontiguousarray(index.matrix, dtype="<f4").tobytes(),
    ])


def decode_store(blob: bytes) -> DescriptorIndex:
    if len(blob) < _DESC_HEADER.size:
        raise ValueError("truncated descriptor store")
    magic, version, count, dim = _DESC_HEADER.unpack_from(blob)
    if magic != DESC_MAGIC:
        raise ValueError("not a descriptor store (bad magic)")
    if version != DESC_VERSION:
        raise ValueError(f"unsupported descriptor store version {version}")
    expected = _DESC_HEADER.size + count * (8 + 12 + 4 * dim)
    if len(blob) != expected:
        raise ValueError("descriptor store length does not match header")
    off = _DESC_HEADER.size
    ids = np.frombuffer(blob, "<u8", count, off).astype(np.uint64)
    off += 8 * count
    poses = np.frombuffer(blob, "<f4", 3 * count, off).reshape(count, 3).astype(np.float32)
    off += 12 * count
    mat = np.frombuffer(blob, "<f4", dim * count, off).reshape(count, dim).astype(np.float32)
    return DescriptorIndex(ids, mat, poses)


def save_store(index: DescriptorIndex, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_bytes(encode_store(index))
    return path


def load_store(path: str | os.PathLike) -> DescriptorIndex:
    return decode_store(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# End-to-end evaluation
# ---------------------------------------------------------------------------

EVAL_MODES = ("cross", "rpr", "lpr")


def evaluate(radar_params, lidar_params, data, Ks=DEFAULT_KS, mode: str = "cross",
             query_transform=None, self_query: bool = False,
             radius: float = POSITIVE_RADIUS) -> MetricsReport:
    """Encode database (loop 0) and queries (loop 1) and score retrieval.

    ``cross``: LiDAR database, radar queries. ``rpr`` / ``lpr``: one modality
    and one branch for both sides. ``query_transform`` modifies LiDAR query
    clouds before projection (e.g. snow clutter); radar queries are never
    transformed. ``self_query`` reuses the database scans as queries.
    """
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    db_mod, q_mod = {"cross": ("lidar", "radar"), "rpr": ("radar", "radar"), "lpr": ("lidar", "lidar")}[mode]
    db_branch = radar_params if db_mod == "radar" else lidar_params
    q_branch = radar_params if q_mod == "radar" else lidar_params

    db_rows = data.rows(0)
    q_rows = db_rows if self_query else data.rows(1)
    transform = query_transform if q_mod == "lidar" else None

    db_desc = encode(db_branch, data.grids(db_mod, db_rows))["d_full"]
    q_desc = encode(q_branch, data.grids(q_mod, q_rows, transform))["d_full"]
    index = build_index(db_desc, data.poses[db_rows], data.scan_ids[db_mod][db_rows])
    return metrics(index, q_desc, data.poses[q_rows], Ks, radius, mode)

"""Histogram estimates of marginal and conditional entropy between paired feature maps.

Co-located cells of the channel-averaged LiDAR and radar feature maps are
treated as samples of two discrete random variables ``L`` and ``R``. All
entropies are in nats.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from r2l.net import feature_maps

BINS = 10
PHASES = ("init", "post-pretrain", "post-align")


@dataclass
class JointHist:
    p: np.ndarray  # (B, B), rows index L bins, columns R bins
    edges_l: np.ndarray
    edges_r: np.ndarray
    n: int

    @property
    def bins(self) -> int:
        return self.p.shape[0]


@dataclass
class EntropyReport:
    H_L: float
    H_R: float
    H_L_given_R: float
    H_R_given_L: float
    bins: int = BINS
    probe: str = ""
    phase: str = ""

    def row(self) -> dict:
        return asdict(self)


def channel_average(fm: np.ndarray, channel_axis: int = -1) -> np.ndarray:
    return np.asarray(fm, dtype=np.float64).mean(axis=channel_axis)


def _edges(values: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        hi = lo + 1e-12
    return np.linspace(lo, hi, bins + 1)


def _digitize(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    # equal-width bins, the maximum falls into the last bin
    bins = len(edges) - 1
    idx = np.floor((values - edges[0]) / (edges[-1] - edges[0]) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def joint_histogram(map_l: np.ndarray, map_r: np.ndarray, bins: int = BINS) -> JointHist:
    """Normalised B x B histogram of co-located values, per-modality min-max binning."""
    l = np.asarray(map_l, dtype=np.float64).ravel()
    r = np.asarray(map_r, dtype=np.float64).ravel()
    if l.shape != r.shape:
        raise ValueError("maps must have the same shape")
    if l.size == 0:
        raise ValueError("need at least one sample")
    if not (np.isfinite(l).all() and np.isfinite(r).all()):
        raise ValueError("non-finite values in feature maps")
    el, er = _edges(l, bins), _edges(r, bins)
    counts = np.zeros((bins, bins))
    np.add.at(counts, (_digitize(l, el), _digitize(r, er)), 1.0)
    return JointHist(counts / l.size, el, er, l.size)


def _plogp_ratio(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(-(p[mask] * np.log(p[mask] / q[mask])).sum())


def conditional_entropy(h: JointHist, direction: str = "L_given_R") -> float:
    """``H(L|R) = -sum P(l, r) log(P(l, r) / P(r))``; ``R_given_L`` divides by ``P(l)``."""
    p = h.p
    if direction == "L_given_R":
        denom = np.broadcast_to(p.sum(axis=0, keepdims=True), p.shape)
    elif direction == "R_given_L":
        denom = np.broadcast_to(p.sum(axis=1, keepdims=True), p.shape)
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return max(_plogp_ratio(p, denom), 0.0)


def _entropy(prob: np.ndarray) -> float:
    prob = prob[prob > 0]
    return max(float(-(prob * np.log(prob)).sum()), 0.0)


def marginal_entropy(h: JointHist, which: str = "L") -> float:
    if which == "L":
        return _entropy(h.p.sum(axis=1))
    if which == "R":
        return _entropy(h.p.sum(axis=0))
    raise ValueError(f"unknown marginal {which!r}")


def entropies(h: JointHist) -> tuple[float, float, float, float]:
    """(H(L), H(R), H(L|R), H(R|L))."""
    return (
        marginal_entropy(h, "L"),
        marginal_entropy(h, "R"),
        conditional_entropy(h, "L_given_R"),
        conditional_entropy(h, "R_given_L"),
    )


def entropy_from_maps(maps_l: np.ndarray, maps_r: np.ndarray, bins: int = BINS) -> np.ndarray:
    """Per-pair entropies for stacks of co-shaped scalar maps, shape (pairs, 4)."""
    return np.array([entropies(joint_histogram(a, b, bins)) for a, b in zip(maps_l, maps_r)])


def entropy_report(radar_params, lidar_params, radar_cells: np.ndarray, lidar_cells: np.ndarray,
                   phase: str = "", bins: int = BINS, probe: str = "probe") -> EntropyReport:
    """Mean per-pair entropies of channel-averaged backbone feature maps."""
    fm_r = channel_average(feature_maps(radar_params, radar_cells))
    fm_l = channel_average(feature_maps(lidar_params, lidar_cells))
    per_pair = entropy_from_maps(fm_l, fm_r, bins)
    mean = [math.fsum(col) / len(col) for col in per_pair.T]
    return EntropyReport(*mean, bins=bins, probe=probe, phase=phase)

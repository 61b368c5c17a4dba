"""Polar bird's-eye-view count grids.

Rows index range, columns index azimuth. A point at bearing ``t`` and planar
range ``r`` lands in column ``floor(0.5 * (1 - t / pi) * w_azi) mod w_azi``
and row ``floor(r / m * h_rng)``; z never takes part.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from r2l.worldgen import TWO_PI, PointCloud


@dataclass(frozen=True)
class GridSpec:
    w_azi: int = 225
    h_rng: int = 50
    m: float = 80.0
    fov: float = TWO_PI

    def __post_init__(self):
        if self.w_azi < 1 or self.h_rng < 1:
            raise ValueError("grid dimensions must be >= 1")
        if not self.m > 0:
            raise ValueError("maximum range must be > 0")
        if not 0.0 < self.fov <= TWO_PI:
            raise ValueError("fov must lie in (0, 2*pi]")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.h_rng, self.w_azi)

    @property
    def full_fov(self) -> bool:
        return self.fov >= TWO_PI

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(int(d["w_azi"]), int(d["h_rng"]), float(d["m"]), float(d["fov"]))


@dataclass
class PolarBEV:
    cells: np.ndarray  # (h_rng, w_azi)
    spec: GridSpec
    sensor: str = ""

    @property
    def total(self) -> float:
        return float(self.cells.sum())


def polar_indices(points: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Row and column of every retained point (points outside range or FoV dropped)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    x, y = pts[:, 0], pts[:, 1]
    rng = np.sqrt(x * x + y * y)
    theta = np.arctan2(y, x)
    keep = rng < spec.m
    if spec.full_fov:
        u = 0.5 * (1.0 - theta / math.pi) * spec.w_azi
        col = np.floor(u).astype(np.int64) % spec.w_azi
    else:
        half = spec.fov / 2
        keep &= (theta >= -half) & (theta <= half)
        u = 0.5 * (1.0 - theta / half) * spec.w_azi
        col = np.clip(np.floor(u).astype(np.int64), 0, spec.w_azi - 1)
    row = np.floor(rng / spec.m * spec.h_rng).astype(np.int64)
    return row[keep], col[keep]


def project_polar(cloud: PointCloud, spec: GridSpec) -> PolarBEV:
    row, col = polar_indices(cloud.points, spec)
    cells = np.zeros(spec.shape, dtype=np.float64)
    np.add.at(cells, (row, col), 1.0)
    return PolarBEV(cells, spec, cloud.sensor)


def rotate_cloud(cloud: PointCloud, dyaw: float) -> PointCloud:
    """Rotate sensor-frame points by ``dyaw`` about the origin.

    The pose yaw moves by ``-dyaw``: the same world seen from a sensor turned
    the other way.
    """
    c, s = math.cos(dyaw), math.sin(dyaw)
    pts = cloud.points.copy()
    x, y = pts[:, 0].copy(), pts[:, 1].copy()
    pts[:, 0] = c * x - s * y
    pts[:, 1] = s * x + c * y
    pose = replace(cloud.pose, yaw=cloud.pose.yaw - dyaw)
    return PointCloud(pts, cloud.sensor, pose, cloud.scan_id)

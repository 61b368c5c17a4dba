"""In-memory view of a generated dataset: per-place count grids for both modalities."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

from r2l.bev import GridSpec, project_polar
from r2l.worldgen import DatasetManifest, PointCloud, ScanRecord

CloudTransform = Callable[[PointCloud], PointCloud]


@dataclass
class PlaceData:
    """Places (poses with a LiDAR and a radar scan) and their polar grids.

    Row ``i`` of every array refers to the same place.
    """

    manifest: DatasetManifest
    spec: GridSpec
    place: np.ndarray  # (N,) place index from the manifest
    loop: np.ndarray  # (N,) loop index, -1 for probes
    poses: np.ndarray  # (N, 3) x, y, yaw
    scan_ids: dict[str, np.ndarray]  # modality -> (N,)
    cells: dict[str, np.ndarray]  # modality -> (N, h_rng, w_azi)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, spec: GridSpec | None = None) -> "PlaceData":
        spec = spec or GridSpec.from_dict(manifest.grid)
        by_place: dict[int, dict[str, ScanRecord]] = {}
        for rec in manifest.scans:
            mod = "lidar" if rec.sensor == "lidar" else "radar"
            by_place.setdefault(rec.place, {})[mod] = rec
        places = sorted(p for p, v in by_place.items() if len(v) == 2)
        recs = [by_place[p] for p in places]
        cells = {
            mod: np.stack([project_polar(manifest.load_cloud(r[mod]), spec).cells for r in recs]).astype(np.float32)
            for mod in ("lidar", "radar")
        }
        return cls(
            manifest=manifest,
            spec=spec,
            place=np.array(places),
            loop=np.array([r["lidar"].loop for r in recs]),
            poses=np.array([[r["lidar"].pose.x, r["lidar"].pose.y, r["lidar"].pose.yaw] for r in recs]),
            scan_ids={mod: np.array([r[mod].scan_id for r in recs]) for mod in ("lidar", "radar")},
            cells=cells,
        )

    @classmethod
    def load(cls, path) -> "PlaceData":
        return cls.from_manifest(DatasetManifest.load(path))

    @property
    def positions(self) -> np.ndarray:
        return self.poses[:, :2]

    @cached_property
    def train(self) -> np.ndarray:
        return np.flatnonzero(self.loop >= 0)

    @cached_property
    def probe(self) -> np.ndarray:
        return np.flatnonzero(self.loop < 0)

    def rows(self, loop: int) -> np.ndarray:
        return np.flatnonzero(self.loop == loop)

    def grids(self, modality: str, rows: np.ndarray, transform: CloudTransform | None = None) -> np.ndarray:
        """Count grids for ``rows``; with ``transform`` the raw clouds are re-read and modified first."""
        if transform is None:
            return self.cells[modality][rows]
        out = []
        for i in rows:
            rec = self.manifest.scan(int(self.scan_ids[modality][i]))
            out.append(project_polar(transform(self.manifest.load_cloud(rec)), self.spec).cells)
        return np.stack(out).astype(np.float32)

"""Synthetic worlds, looped trajectories and paired radar/LiDAR scans.

Worlds are flat 2D scenes made of wall segments and round pillars. A sensor
pose casts rays against them; per-profile noise, dropout and ghost clutter
turn the clean returns into a LiDAR-like or radar-like point cloud.
"""

from __future__ import annotations

import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

TWO_PI = 2.0 * math.pi

SCAN_MAGIC = b"RLPRSCAN"
SCAN_VERSION = 1
_SCAN_HEADER = struct.Struct("<8sHI")

MANIFEST_FORMAT = "r2l-manifest"
MANIFEST_VERSION = 1

POSITIVE_RADIUS = 9.0
NEGATIVE_RADIUS = 12.0

SENSOR_KINDS = ("lidar", "scanning_radar", "single_chip_radar", "radar_4d")
RADAR_KINDS = SENSOR_KINDS[1:]


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    return -((-a + math.pi) % TWO_PI - math.pi)


def derive_seed(*keys: int) -> int:
    """Stable 64-bit seed from a tuple of non-negative integers (order matters)."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def distance(self, other: "Pose2D") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class SensorProfile:
    kind: str
    n_azimuths: int
    fov: float = TWO_PI
    range_max: float = 80.0
    range_noise_sigma: float = 0.0
    dropout_prob: float = 0.0
    ghost_rate: int = 0
    z_mode: str = "planar"

    def __post_init__(self):
        if self.kind not in SENSOR_KINDS:
            raise ValueError(f"unknown sensor kind {self.kind!r}")
        if not 0.0 < self.fov <= TWO_PI:
            raise ValueError("fov must lie in (0, 2*pi]")
        if not 0.0 < self.range_max <= 80.0:
            raise ValueError("range_max must lie in (0, 80] m")
        if self.n_azimuths < 1:
            raise ValueError("n_azimuths must be >= 1")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout_prob must lie in [0, 1]")
        if self.ghost_rate < 0 or self.range_noise_sigma < 0:
            raise ValueError("ghost_rate and range_noise_sigma must be >= 0")
        if self.z_mode not in ("planar", "jittered"):
            raise ValueError(f"unknown z_mode {self.z_mode!r}")

    @property
    def full_fov(self) -> bool:
        return self.fov >= TWO_PI

    def bearings(self) -> np.ndarray:
        """Ray bearings in the sensor frame.

        Full-circle sensors start at bearing pi (the wrapped -pi) so that
        bearing 0 is always sampled for even ray counts. Limited-FoV sensors
        sample bin centres, keeping every ray strictly inside the FoV.
        """
        k = np.arange(self.n_azimuths, dtype=np.float64)
        if self.full_fov:
            theta = -math.pi + TWO_PI * k / self.n_azimuths
            theta[theta <= -math.pi] += TWO_PI
            return theta
        return -self.fov / 2 + self.fov * (k + 0.5) / self.n_azimuths


DEFAULT_PROFILES: dict[str, SensorProfile] = {
    "lidar": SensorProfile("lidar", 1080, range_noise_sigma=0.02),
    "scanning_radar": SensorProfile(
        "scanning_radar", 400, range_noise_sigma=0.3, dropout_prob=0.1, ghost_rate=20
    ),
    "single_chip_radar": SensorProfile(
        "single_chip_radar", 96, range_noise_sigma=0.5, dropout_prob=0.4, ghost_rate=40
    ),
    "radar_4d": SensorProfile(
        "radar_4d", 128, fov=TWO_PI / 3, range_noise_sigma=0.3, ghost_rate=10, z_mode="jittered"
    ),
}

# short names accepted on the command line
RADAR_ALIASES = {
    "scanning": "scanning_radar",
    "single_chip": "single_chip_radar",
    "4d": "radar_4d",
}


def resolve_radar_kind(name: str) -> str:
    kind = RADAR_ALIASES.get(name, name)
    if kind not in RADAR_KINDS:
        raise ValueError(f"unknown radar profile {name!r}")
    return kind


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3)
    sensor: str
    pose: Pose2D
    scan_id: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class WorldConfig:
    extent: tuple[float, float, float, float] = (-100.0, -100.0, 100.0, 100.0)
    n_segments: int = 40
    n_circles: int = 20
    segment_length: tuple[float, float] = (8.0, 40.0)
    circle_radius: tuple[float, float] = (0.5, 3.0)


@dataclass
class World:
    seed: int
    segments: np.ndarray  # (S, 4): x0, y0, x1, y1
    circles: np.ndarray  # (C, 3): cx, cy, r
    extent: tuple[float, float, float, float]

    @property
    def landmarks(self) -> list[tuple]:
        return [("segment", *map(float, s)) for s in self.segments] + [
            ("circle", *map(float, c)) for c in self.circles
        ]

    def contains(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.extent
        return x0 <= x <= x1 and y0 <= y <= y1

    def surface_distance(self, xy: np.ndarray) -> np.ndarray:
        """Distance from each world-frame point to the nearest landmark surface."""
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        best = np.full(len(xy), np.inf)
        if len(self.segments):
            p0 = self.segments[None, :, :2]
            d = self.segments[None, :, 2:] - p0
            rel = xy[:, None, :] - p0
            t = np.clip((rel * d).sum(-1) / (d * d).sum(-1), 0.0, 1.0)
            near = p0 + t[..., None] * d
            best = np.minimum(best, np.linalg.norm(xy[:, None, :] - near, axis=-1).min(1))
        if len(self.circles):
            c = self.circles[None, :, :2]
            dist = np.abs(np.linalg.norm(xy[:, None, :] - c, axis=-1) - self.circles[None, :, 2])
            best = np.minimum(best, dist.min(1))
        return best


@dataclass(frozen=True)
class TrajConfig:
    loops: int = 2
    spacing: float = 2.0
    loop_length: float = 400.0
    # per-loop displacement of the revisit, so positives are near but never identical
    along_offset: float = 1.0
    lateral_offset: float = 1.0
    wobble: float = 0.12


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def generate_world(seed: int, cfg: WorldConfig = WorldConfig()) -> World:
    x0, y0, x1, y1 = cfg.extent
    if not (x1 > x0 and y1 > y0):
        raise ValueError("world extent has zero area")
    if cfg.n_segments <= 0 or cfg.n_circles <= 0:
        raise ValueError("landmark counts must be > 0")
    rng = np.random.default_rng(derive_seed(seed, 0x5EED))

    segments = []
    while len(segments) < cfg.n_segments:
        length = rng.uniform(*cfg.segment_length)
        ang = rng.uniform(0.0, math.pi)
        cx, cy = rng.uniform(x0, x1), rng.uniform(y0, y1)
        dx, dy = 0.5 * length * math.cos(ang), 0.5 * length * math.sin(ang)
        seg = (cx - dx, cy - dy, cx + dx, cy + dy)
        if x0 <= min(seg[0], seg[2]) and max(seg[0], seg[2]) <= x1 and y0 <= min(seg[1], seg[3]) and max(seg[1], seg[3]) <= y1:
            segments.append(seg)

    circles = []
    while len(circles) < cfg.n_circles:
        r = rng.uniform(*cfg.circle_radius)
        cx, cy = rng.uniform(x0 + r, x1 - r), rng.uniform(y0 + r, y1 - r)
        circles.append((cx, cy, r))

    return World(seed, np.array(segments), np.array(circles), tuple(map(float, cfg.extent)))


def _loop_shape(phi: np.ndarray, coeffs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-scale radius and its derivative for a smooth star-shaped loop."""
    r = np.ones_like(phi)
    dr = np.zeros_like(phi)
    for k, (amp, phase) in enumerate(coeffs, start=2):
        r += amp * np.cos(k * phi + phase)
        dr -= amp * k * np.sin(k * phi + phase)
    return r, dr


def generate_trajectory(world: World, seed: int, cfg: TrajConfig = TrajConfig()) -> list[Pose2D]:
    """Closed loop around the world centre, traversed ``cfg.loops`` times."""
    if cfg.spacing <= 0:
        raise ValueError("pose spacing must be > 0")
    if cfg.loops < 2:
        raise ValueError("need at least two loops for revisits")
    rng = np.random.default_rng(derive_seed(seed, 0x7AA1))
    x0, y0, x1, y1 = world.extent
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    half = 0.5 * min(x1 - x0, y1 - y0)
    margin = 5.0

    phi = np.linspace(0.0, TWO_PI, 20001)
    for _ in range(100):
        coeffs = np.stack(
            [rng.uniform(0, cfg.wobble, 2), rng.uniform(0, TWO_PI, 2)], axis=1
        )
        r, dr = _loop_shape(phi, coeffs)
        seg = np.hypot(np.diff(r * np.cos(phi)), np.diff(r * np.sin(phi)))
        scale = cfg.loop_length / seg.sum()
        if scale * r.max() + margin < half:
            break
    else:
        raise ValueError("loop_length too long for the world extent")

    arc = np.concatenate([[0.0], np.cumsum(seg)]) * scale
    n_per_loop = int(round(cfg.loop_length / cfg.spacing))
    poses = []
    for loop in range(cfg.loops):
        s = (np.arange(n_per_loop) * cfg.spacing + loop * cfg.along_offset) % arc[-1]
        ph = np.interp(s, arc, phi)
        rr, drr = _loop_shape(ph, coeffs)
        px, py = scale * rr * np.cos(ph), scale * rr * np.sin(ph)
        tx = scale * (drr * np.cos(ph) - rr * np.sin(ph))
        ty = scale * (drr * np.sin(ph) + rr * np.cos(ph))
        yaw = np.arctan2(ty, tx)
        # left-hand normal of the direction of travel
        norm = np.hypot(tx, ty)
        nx, ny = -ty / norm, tx / norm
        off = loop * cfg.lateral_offset
        for i in range(n_per_loop):
            poses.append(Pose2D(cx + px[i] + off * nx[i], cy + py[i] + off * ny[i], yaw[i]))
    return poses


def _ray_cast(world: World, pose: Pose2D, theta: np.ndarray) -> np.ndarray:
    """Range to the first landmark hit along each sensor-frame bearing (inf on miss)."""
    ang = pose.yaw + theta
    d = np.stack([np.cos(ang), np.sin(ang)], axis=1)  # (R, 2)
    o = np.array([pose.x, pose.y])
    best = np.full(len(theta), np.inf)

    if len(world.segments):
        p0 = world.segments[:, :2]
        e = world.segments[:, 2:] - p0  # (S, 2)
        w = p0 - o  # (S, 2)
        # o + t d = p0 + s e  ->  t d - s e = w
        den = d[:, None, 0] * (-e[None, :, 1]) - d[:, None, 1] * (-e[None, :, 0])
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (w[None, :, 0] * (-e[None, :, 1]) - w[None, :, 1] * (-e[None, :, 0])) / den
            s = (d[:, None, 0] * w[None, :, 1] - d[:, None, 1] * w[None, :, 0]) / den
        ok = (np.abs(den) > 1e-12) & (t > 1e-9) & (s >= 0.0) & (s <= 1.0)
        best = np.minimum(best, np.where(ok, t, np.inf).min(1))

    if len(world.circles):
        c = world.circles[:, :2] - o  # (C, 2)
        r = world.circles[:, 2]
        b = d @ c.T  # (R, C)
        disc = b * b - ((c * c).sum(1) - r * r)[None, :]
        with np.errstate(invalid="ignore"):
            sq = np.sqrt(disc)
        near, far = b - sq, b + sq
        t = np.where(near > 1e-9, near, far)
        ok = (disc >= 0.0) & (t > 1e-9)
        best = np.minimum(best, np.where(ok, t, np.inf).min(1))
    return best


def simulate_scan(world: World, pose: Pose2D, profile: SensorProfile, seed: int, scan_id: int = 0) -> PointCloud:
    rng = np.random.default_rng(seed)
    theta = profile.bearings()
    rng_true = _ray_cast(world, pose, theta)

    noise = rng.standard_normal(len(theta)) * profile.range_noise_sigma
    keep_draw = rng.random(len(theta))
    rho = rng_true + noise
    keep = (
        np.isfinite(rng_true)
        & (rng_true < profile.range_max)
        & (rho > 0.0)
        & (rho < profile.range_max)
        & (keep_draw >= profile.dropout_prob)
    )
    theta, rho = theta[keep], rho[keep]

    n_ghost = int(profile.ghost_rate)
    g_theta = rng.random(n_ghost)
    g_theta = (-math.pi + TWO_PI * g_theta) if profile.full_fov else (-profile.fov / 2 + profile.fov * g_theta)
    g_rho = rng.random(n_ghost) * profile.range_max
    theta = np.concatenate([theta, g_theta])
    rho = np.concatenate([rho, g_rho])

    if profile.z_mode == "jittered":
        z = rng.uniform(-2.0, 2.0, len(rho))
    else:
        z = np.zeros(len(rho))
    pts = np.stack([rho * np.cos(theta), rho * np.sin(theta), z], axis=1)
    return PointCloud(pts, profile.kind, pose, scan_id)


def corrupt_snow(cloud: PointCloud, clutter_count: int, near_bias: float = 4.0, seed: int = 0,
                 range_max: float = 80.0) -> PointCloud:
    """Add snowfall clutter concentrated near the sensor.

    Clutter ranges follow an exponential law with scale ``near_bias``,
    truncated at ``range_max``; bearings are uniform.
    """
    if clutter_count < 0:
        raise ValueError("clutter_count must be >= 0")
    if clutter_count == 0:
        return PointCloud(cloud.points.copy(), cloud.sensor, cloud.pose, cloud.scan_id)
    rng = np.random.default_rng(seed)
    u = rng.random(clutter_count)
    rho = -near_bias * np.log1p(-u * (1.0 - math.exp(-range_max / near_bias)))
    theta = rng.uniform(-math.pi, math.pi, clutter_count)
    z = rng.uniform(-2.0, 2.0, clutter_count)
    extra = np.stack([rho * np.cos(theta), rho * np.sin(theta), z], axis=1)
    return PointCloud(np.concatenate([cloud.points, extra]), cloud.sensor, cloud.pose, cloud.scan_id)


# ---------------------------------------------------------------------------
# Scan files
# ---------------------------------------------------------------------------


def encode_scan(points: np.ndarray) -> bytes:
    pts = np.ascontiguousarray(points, dtype="<f4").reshape(-1, 3)
    return _SCAN_HEADER.pack(SCAN_MAGIC, SCAN_VERSION, len(pts)) + pts.tobytes()


def decode_scan(blob: bytes) -> np.ndarray:
    if len(blob) < _SCAN_HEADER.size:
        raise ValueError("truncated scan file")
    magic, version, count = _SCAN_HEADER.unpack_from(blob)
    if magic != SCAN_MAGIC:
        raise ValueError("not a scan file (bad magic)")
    if version != SCAN_VERSION:
        raise ValueError(f"unsupported scan file version {version}")
    body = blob[_SCAN_HEADER.size:]
    if len(body) != count * 12:
        raise ValueError("scan file length does not match point count")
    return np.frombuffer(body, dtype="<f4").reshape(count, 3).astype(np.float64)


def write_scan(path: str | os.PathLike, points: np.ndarray) -> None:
    Path(path).write_bytes(encode_scan(points))


def read_scan(path: str | os.PathLike) -> np.ndarray:
    return decode_scan(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    radar: str = "single_chip_radar"
    world_seed: int = 0
    traj_seed: int = 0
    world: WorldConfig = WorldConfig()
    traj: TrajConfig = TrajConfig()
    probe_count: int = 64


@dataclass(frozen=True)
class ScanRecord:
    scan_id: int
    place: int
    loop: int  # -1 for probe places
    sensor: str
    pose: Pose2D
    path: str


@dataclass
class DatasetManifest:
    root: Path
    world_seed: int
    radar: str
    profiles: dict[str, SensorProfile]
    scans: list[ScanRecord]
    splits: dict[str, list[int]]
    grid: dict = field(default_factory=dict)

    def __post_init__(self):
        self._by_id = {s.scan_id: s for s in self.scans}

    def scan(self, scan_id: int) -> ScanRecord:
        return self._by_id[scan_id]

    def select(self, *, sensor: str | None = None, loop: int | None = None,
               split: str | None = None) -> list[ScanRecord]:
        """Scans filtered by modality (``"lidar"``/``"radar"``), loop and split."""
        ids = set(self.splits[split]) if split else None
        out = []
        for s in self.scans:
            if sensor == "lidar" and s.sensor != "lidar":
                continue
            if sensor == "radar" and s.sensor == "lidar":
                continue
            if loop is not None and s.loop != loop:
                continue
            if ids is not None and s.scan_id not in ids:
                continue
            out.append(s)
        return out

    def load_points(self, rec: ScanRecord) -> np.ndarray:
        return read_scan(self.root / rec.path)

    def load_cloud(self, rec: ScanRecord) -> PointCloud:
        return PointCloud(self.load_points(rec), rec.sensor, rec.pose, rec.scan_id)

    def to_json(self) -> str:
        doc = {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "world_seed": self.world_seed,
            "radar": self.radar,
            "grid": self.grid,
            "profiles": {k: asdict(p) for k, p in sorted(self.profiles.items())},
            "scans": [
                {
                    "scan_id": s.scan_id,
                    "place": s.place,
                    "loop": s.loop,
                    "sensor": s.sensor,
                    "pose": [s.pose.x, s.pose.y, s.pose.yaw],
                    "path": s.path,
                }
                for s in self.scans
            ],
            "splits": {k: list(v) for k, v in sorted(self.splits.items())},
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def save(self, path: str | os.PathLike | None = None) -> Path:
        path = Path(path) if path else self.root / "manifest.json"
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        doc = json.loads(path.read_text())
        if doc.get("format") != MANIFEST_FORMAT:
            raise ValueError(f"{path} is not a dataset manifest")
        if doc.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {doc.get('version')}")
        scans = [
            ScanRecord(s["scan_id"], s["place"], s["loop"], s["sensor"], Pose2D(*s["pose"]), s["path"])
            for s in doc["scans"]
        ]
        profiles = {k: SensorProfile(**v) for k, v in doc["profiles"].items()}
        return cls(path.parent, doc["world_seed"], doc["radar"], profiles, scans, doc["splits"], doc["grid"])


def grid_for(radar_kind: str) -> dict:
    """Polar grid shared by both modalities for a given radar type."""
    if radar_kind == "radar_4d":
        return {"w_azi": 100, "h_rng": 100, "m": 80.0, "fov": DEFAULT_PROFILES["radar_4d"].fov}
    return {"w_azi": 225, "h_rng": 50, "m": 80.0, "fov": TWO_PI}


def check_positive_coverage(query: list[Pose2D], database: list[Pose2D], radius: float = POSITIVE_RADIUS) -> bool:
    q = np.array([[p.x, p.y] for p in query])
    d = np.array([[p.x, p.y] for p in database])
    dist = np.linalg.norm(q[:, None] - d[None], axis=-1)
    return bool((dist.min(1) < radius).all())


def _probe_poses(world: World, cfg: DatasetConfig) -> list[Pose2D]:
    # held-out places: the first loop shifted by half a pose spacing along track
    shifted = TrajConfig(
        loops=2, spacing=cfg.traj.spacing, loop_length=cfg.traj.loop_length,
        along_offset=cfg.traj.spacing / 2, lateral_offset=0.0, wobble=cfg.traj.wobble,
    )
    n = int(round(cfg.traj.loop_length / cfg.traj.spacing))
    ring = generate_trajectory(world, cfg.traj_seed, shifted)[n:]
    idx = np.linspace(0, n, cfg.probe_count, endpoint=False).astype(int)
    return [ring[i] for i in idx]


def build_dataset(cfg: DatasetConfig, out_dir: str | os.PathLike, threads: int | None = None) -> DatasetManifest:
    """Generate a world, trajectory and all scans; write files and manifest.

    Loop 0 LiDAR scans form the database, loop 1 radar scans the queries,
    and every scan of loops 0 and 1 joins the training split. Probe places
    receive paired scans in a separate ``probe`` split.
    """
    radar = resolve_radar_kind(cfg.radar)
    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)

    world = generate_world(cfg.world_seed, cfg.world)
    poses = generate_trajectory(world, cfg.traj_seed, cfg.traj)
    n_per_loop = len(poses) // cfg.traj.loops
    places = [(i, i // n_per_loop, p) for i, p in enumerate(poses)]
    places += [(len(poses) + j, -1, p) for j, p in enumerate(_probe_poses(world, cfg))]

    profiles = {"lidar": DEFAULT_PROFILES["lidar"], "radar": DEFAULT_PROFILES[radar]}
    jobs = []
    for place, loop, pose in places:
        for k, mod in enumerate(("lidar", "radar")):
            scan_id = 2 * place + k
            jobs.append((scan_id, place, loop, profiles[mod], pose))

    def run(job):
        scan_id, place, loop, prof, pose = job
        cloud = simulate_scan(world, pose, prof, derive_seed(cfg.world_seed, scan_id), scan_id)
        rel = f"scans/{scan_id:06d}.bin"
        write_scan(out / rel, cloud.points)
        return ScanRecord(scan_id, place, loop, prof.kind, pose, rel)

    threads = threads or int(os.environ.get("RLPR_THREADS", "1"))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            records = list(pool.map(run, jobs))
    else:
        records = [run(j) for j in jobs]

    splits = {
        "train": [r.scan_id for r in records if r.loop >= 0],
        "database": [r.scan_id for r in records if r.loop == 0 and r.sensor == "lidar"],
        "query": [r.scan_id for r in records if r.loop == 1 and r.sensor != "lidar"],
        "probe": [r.scan_id for r in records if r.loop < 0],
    }
    by_id = {r.scan_id: r for r in records}
    if not check_positive_coverage([by_id[i].pose for i in splits["query"]],
                                   [by_id[i].pose for i in splits["database"]]):
        raise ValueError("a query has no database positive within 9 m")

    manifest = DatasetManifest(out, cfg.world_seed, radar, profiles, records, splits, grid_for(radar))
    manifest.save()
    return manifest

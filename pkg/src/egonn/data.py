"""Synthetic rotating-LiDAR scenes, point-cloud/pose file I/O and training-pair pools.

The synthetic world is a closed road loop lined with pole-like objects
(tree trunks), box buildings set back from the road and small scatter
clusters. Scans are range-limited samples of pre-sampled object surfaces seen
from a sensor pose, with at most one point per (elevation ring, azimuth bin)
cell. There is no occlusion model and no ground is generated.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PoseSE3, as_cloud, orthonormalize

SENSOR_HEIGHT = 1.8


class DataError(ValueError):
    """Malformed input files or impossible generation requests."""


@dataclass(frozen=True)
class WorldSpec:
    extent: float = 400.0
    road_radius: float = 110.0
    road_wobble: float = 0.18
    road_halfwidth: float = 6.0
    n_poles: int = 900
    pole_radius: tuple[float, float] = (0.15, 0.45)
    pole_height: tuple[float, float] = (3.0, 8.0)
    n_boxes: int = 110
    box_size: tuple[float, float] = (4.0, 16.0)
    box_height: tuple[float, float] = (3.0, 12.0)
    n_scatter: int = 250
    scatter_size: tuple[float, float] = (0.5, 1.5)
    spacing: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.extent <= 0 or self.spacing <= 0:
            raise ValueError("extent and spacing must be positive")
        if min(self.n_poles, self.n_boxes, self.n_scatter) < 0:
            raise ValueError("object counts must be non-negative")
        if self.road_radius * (1 + self.road_wobble) + self.road_halfwidth > self.extent / 2:
            raise ValueError("road does not fit inside the world extent")


@dataclass(frozen=True)
class ScanSpec:
    max_range: float = 40.0
    azimuth_resolution: float = 1.0
    rings: int = 24
    elevation_range: tuple[float, float] = (-22.0, 12.0)
    noise_sigma: float = 0.02

    def __post_init__(self):
        if self.max_range <= 0 or self.azimuth_resolution <= 0 or self.rings <= 0:
            raise ValueError("max_range, azimuth_resolution and rings must be positive")

    @property
    def azimuth_bins(self) -> int:
        return int(math.ceil(360.0 / self.azimuth_resolution))

    @property
    def max_points(self) -> int:
        return self.rings * self.azimuth_bins


@dataclass(frozen=True)
class TrajectorySpec:
    """A stretch of the road loop: ``count`` poses every ``spacing`` meters from ``start``."""

    start: float = 0.0
    count: int = 200
    spacing: float = 1.5
    lateral_offset: float = 0.0
    reverse: bool = False


@dataclass
class World:
    spec: WorldSpec
    points: np.ndarray
    road: np.ndarray
    poles: np.ndarray = field(repr=False)
    _tree: cKDTree | None = field(default=None, repr=False)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points[:, :2])
        return self._tree

    @property
    def road_length(self) -> float:
        seg = np.diff(np.vstack([self.road, self.road[:1]]), axis=0)
        return float(np.linalg.norm(seg, axis=1).sum())

    def road_point(self, s: float) -> tuple[np.ndarray, float]:
        """Position and heading at arclength ``s`` along the closed road."""
        closed = np.vstack([self.road, self.road[:1]])
        seg = np.diff(closed, axis=0)
        lens = np.linalg.norm(seg, axis=1)
        cum = np.concatenate([[0.0], np.cumsum(lens)])
        s = s % cum[-1]
        i = int(np.searchsorted(cum, s, side="right") - 1)
        i = min(i, len(seg) - 1)
        f = (s - cum[i]) / lens[i]
        p = closed[i] + f * seg[i]
        return p, math.atan2(seg[i, 1], seg[i, 0])


@dataclass
class Scan:
    cloud: np.ndarray
    pose: PoseSE3
    timestamp: float


@dataclass
class Traversal:
    scans: list[Scan]

    @property
    def poses(self) -> list[PoseSE3]:
        return [s.pose for s in self.scans]

    @property
    def clouds(self) -> list[np.ndarray]:
        return [s.cloud for s in self.scans]

    def __len__(self):
        return len(self.scans)


def _road_polyline(spec: WorldSpec, rng: np.random.Generator, n: int = 720) -> np.ndarray:
    phi = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
    r = np.full(n, float(spec.road_radius))
    for k in (2, 3, 5):
        r += spec.road_radius * spec.road_wobble / k * np.sin(k * phi + rng.uniform(0, 2 * math.pi))
    return np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)


def _distance_to_road(xy: np.ndarray, road_tree: cKDTree) -> np.ndarray:
    d, _ = road_tree.query(xy)
    return d


def _sample_cylinder(center, radius, height, spacing, rng) -> np.ndarray:
    n_around = max(6, int(math.ceil(2 * math.pi * radius / spacing)))
    n_up = max(2, int(math.ceil(height / spacing)))
    a = rng.uniform(0, 2 * math.pi, n_around * n_up)
    z = rng.uniform(0, height, n_around * n_up)
    return np.stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a), z], axis=1)


def _sample_box(center, size, yaw, height, spacing, rng) -> np.ndarray:
    sx, sy = size
    perim = 2 * (sx + sy)
    n = int(perim * height / spacing ** 2)
    t = rng.uniform(0, perim, n)
    z = rng.uniform(0, height, n)
    x = np.empty(n)
    y = np.empty(n)
    e1 = t < sx
    e2 = (t >= sx) & (t < sx + sy)
    e3 = (t >= sx + sy) & (t < 2 * sx + sy)
    e4 = t >= 2 * sx + sy
    x[e1], y[e1] = t[e1] - sx / 2, -sy / 2
    x[e2], y[e2] = sx / 2, t[e2] - sx - sy / 2
    x[e3], y[e3] = sx / 2 - (t[e3] - sx - sy), sy / 2
    x[e4], y[e4] = -sx / 2, sy / 2 - (t[e4] - 2 * sx - sy)
    c, s = math.cos(yaw), math.sin(yaw)
    return np.stack([center[0] + c * x - s * y, center[1] + s * x + c * y, z], axis=1)


def generate_world(spec: WorldSpec) -> World:
    rng = np.random.default_rng(spec.seed)
    road = _road_polyline(spec, rng)
    road_tree = cKDTree(road)
    half = spec.extent / 2
    parts = []
    poles = []
    # poles: roughly two thirds line the roadsides, the rest anywhere off-road
    n_side = (2 * spec.n_poles) // 3
    for i in range(spec.n_poles):
        for _ in range(50):
            if i < n_side:
                k = rng.integers(len(road))
                nxt = road[(k + 1) % len(road)] - road[k]
                normal = np.array([-nxt[1], nxt[0]]) / np.linalg.norm(nxt)
                side = 1 if rng.random() < 0.5 else -1
                xy = road[k] + normal * side * (spec.road_halfwidth + rng.uniform(0.5, 4.0))
            else:
                xy = rng.uniform(-half, half, 2)
            if _distance_to_road(xy[None], road_tree)[0] > spec.road_halfwidth:
                break
        radius = rng.uniform(*spec.pole_radius)
        height = rng.uniform(*spec.pole_height)
        poles.append((xy[0], xy[1], radius, height))
        parts.append(_sample_cylinder(xy, radius, height, spec.spacing, rng))
    for _ in range(spec.n_boxes):
        size = rng.uniform(*spec.box_size, 2)
        for _ in range(100):
            xy = rng.uniform(-half, half, 2)
            if _distance_to_road(xy[None], road_tree)[0] > spec.road_halfwidth + 5.0 + size.max() / 2:
                break
        parts.append(_sample_box(xy, size, rng.uniform(0, math.pi), rng.uniform(*spec.box_height),
                                 spec.spacing, rng))
    for _ in range(spec.n_scatter):
        for _ in range(50):
            xy = rng.uniform(-half, half, 2)
            if _distance_to_road(xy[None], road_tree)[0] > spec.road_halfwidth:
                break
        size = rng.uniform(*spec.scatter_size)
        n = int(40 * size ** 2 / spec.spacing)
        blob = rng.normal(0, size / 2, (n, 3))
        blob[:, 2] = np.abs(blob[:, 2]) + 0.9
        parts.append(blob + np.array([xy[0], xy[1], 0.0]))
    points = np.vstack(parts) if parts else np.zeros((0, 3))
    return World(spec, points, road, np.array(poles).reshape(-1, 4))


def scan_world(world: World, pose: PoseSE3, scan: ScanSpec, rng: np.random.Generator) -> np.ndarray:
    """One sensor-frame scan: at most one surface point per (ring, azimuth) cell."""
    center = pose.translation
    idx = world.tree.query_ball_point(center[:2], scan.max_range)
    pts = world.points[np.asarray(idx, dtype=np.int64)]
    local = pose.inverse().apply(pts)
    dist = np.linalg.norm(local, axis=1)
    keep = (dist <= scan.max_range) & (dist > 0.5)
    local, dist = local[keep], dist[keep]
    elev = np.degrees(np.arcsin(local[:, 2] / dist))
    lo, hi = scan.elevation_range
    ring = np.floor((elev - lo) / (hi - lo) * scan.rings).astype(np.int64)
    az = np.degrees(np.arctan2(local[:, 1], local[:, 0])) % 360.0
    abin = np.floor(az / scan.azimuth_resolution).astype(np.int64) % scan.azimuth_bins
    ok = (ring >= 0) & (ring < scan.rings)
    local, ring, abin = local[ok], ring[ok], abin[ok]
    cell = ring * scan.azimuth_bins + abin
    # random representative per cell
    order = np.lexsort((rng.random(len(cell)), cell))
    cell_sorted = cell[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = cell_sorted[1:] != cell_sorted[:-1]
    chosen = local[order[first]]
    if scan.noise_sigma > 0:
        chosen = chosen + rng.normal(0.0, scan.noise_sigma, chosen.shape)
    # noise may push a point a hair beyond the range limit
    chosen = chosen[np.linalg.norm(chosen, axis=1) <= scan.max_range]
    return chosen


def trajectory_poses(world: World, traj: TrajectorySpec) -> list[PoseSE3]:
    poses = []
    for i in range(traj.count):
        s = traj.start + i * traj.spacing
        p, heading = world.road_point(s)
        if traj.reverse:
            heading += math.pi
        normal = np.array([-math.sin(heading), math.cos(heading)])
        xy = p + traj.lateral_offset * normal
        poses.append(PoseSE3.from_yaw(heading, (xy[0], xy[1], SENSOR_HEIGHT)))
    return poses


def perturb_poses(poses: Sequence[PoseSE3], rng: np.random.Generator, max_translation: float,
                  max_yaw_deg: float) -> list[PoseSE3]:
    """Independently jitter each pose in the x-y plane (disk of ``max_translation``) and yaw."""
    out = []
    for pose in poses:
        r = max_translation * math.sqrt(rng.random())
        a = rng.uniform(0, 2 * math.pi)
        dyaw = math.radians(rng.uniform(-max_yaw_deg, max_yaw_deg))
        t = pose.translation + np.array([r * math.cos(a), r * math.sin(a), 0.0])
        out.append(PoseSE3.from_yaw(pose.yaw + dyaw, t))
    return out


def generate_traversal(world: World, traj: TrajectorySpec | Sequence[PoseSE3], scan: ScanSpec,
                       seed: int = 0, perturbation: tuple[float, float] = (0.0, 0.0),
                       time_step: float = 0.1) -> Traversal:
    """Scan the world along a trajectory.

    ``perturbation = (max_translation_m, max_yaw_deg)`` jitters each pose, which
    produces a second traversal of the same path for query/database splits.
    """
    rng = np.random.default_rng(seed)
    poses = trajectory_poses(world, traj) if isinstance(traj, TrajectorySpec) else list(traj)
    if perturbation[0] > 0 or perturbation[1] > 0:
        poses = perturb_poses(poses, rng, *perturbation)
    half = world.spec.extent / 2
    scans = []
    for i, pose in enumerate(poses):
        if np.any(np.abs(pose.translation[:2]) > half):
            raise DataError(f"pose {i} at {pose.translation[:2]} lies outside the world extent")
        cloud = scan_world(world, pose, scan, np.random.default_rng([seed, i]))
        scans.append(Scan(cloud, pose, i * time_step))
    return Traversal(scans)


# ---------------------------------------------------------------- file I/O

def save_cloud(path, cloud, layout: str = "xyz") -> None:
    pts = as_cloud(cloud).astype("<f4")
    if layout == "xyzi":
        pts = np.hstack([pts, np.zeros((len(pts), 1), dtype="<f4")])
    elif layout != "xyz":
        raise ValueError(f"unknown layout {layout!r}")
    Path(path).write_bytes(pts.tobytes())


def load_cloud(path, layout: str = "xyz") -> np.ndarray:
    """Read raw little-endian float32 records; intensity of ``xyzi`` files is dropped."""
    width = {"xyz": 3, "xyzi": 4}.get(layout)
    if width is None:
        raise ValueError(f"unknown layout {layout!r}")
    raw = Path(path).read_bytes()
    rec = 4 * width
    if len(raw) % rec:
        bad = len(raw) - len(raw) % rec
        raise DataError(f"{path}: size {len(raw)} is not a multiple of the {rec}-byte record; "
                        f"partial record at byte offset {bad}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(-1, width)
    return arr[:, :3].astype(np.float64)


def format_pose(pose: PoseSE3) -> str:
    return " ".join(repr(float(v)) for v in pose.as_3x4().reshape(-1))


def save_poses(path, poses: Sequence[PoseSE3]) -> None:
    Path(path).write_text("".join(format_pose(p) + "\n" for p in poses))


def parse_pose(values: Sequence[float], where: str = "") -> PoseSE3:
    m = np.asarray(values, dtype=np.float64).reshape(3, 4)
    r = m[:, :3]
    dev = max(np.abs(r.T @ r - np.eye(3)).max(), abs(np.linalg.det(r) - 1.0))
    if not np.isfinite(dev) or dev > 1e-3:
        raise DataError(f"{where}rotation is not orthonormal (deviation {dev:.3g})")
    return PoseSE3(orthonormalize(r) if dev > 0 else r, m[:, 3])


def load_poses(path) -> list[PoseSE3]:
    """KITTI-style pose file: one row-major 3x4 matrix (12 reals) per line."""
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            vals = [float(v) for v in parts]
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric pose entry") from None
        if len(vals) != 12:
            raise DataError(f"{path}:{lineno}: expected 12 values, got {len(vals)}")
        poses.append(parse_pose(vals, f"{path}:{lineno}: "))
    return poses


MANIFEST_HEADER = ["index", "cloud_path", "timestamp"] + [f"T{r}{c}" for r in range(3) for c in range(4)]


def save_traversal(traversal: Traversal, directory, name: str, layout: str = "xyz") -> Path:
    """Write clouds under ``directory/name/`` and a CSV manifest ``directory/name.csv``."""
    directory = Path(directory)
    cloud_dir = directory / name
    cloud_dir.mkdir(parents=True, exist_ok=True)
    manifest = directory / f"{name}.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for i, scan in enumerate(traversal.scans):
            rel = f"{name}/{i:06d}.bin"
            save_cloud(directory / rel, scan.cloud, layout)
            w.writerow([i, rel, repr(float(scan.timestamp))]
                       + [repr(float(v)) for v in scan.pose.as_3x4().reshape(-1)])
    return manifest


@dataclass
class ManifestEntry:
    index: int
    cloud_path: Path
    timestamp: float
    pose: PoseSE3


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise DataError(f"{path}: unexpected manifest header")
        last_t = -math.inf
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} columns")
            try:
                t = float(row[2])
                pose = parse_pose([float(v) for v in row[3:]], f"{path}:{lineno}: ")
                idx = int(row[0])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if t < last_t:
                raise DataError(f"{path}:{lineno}: timestamps must be non-decreasing")
            last_t = t
            entries.append(ManifestEntry(idx, path.parent / row[1], t, pose))
    return entries


def load_traversal(manifest, layout: str = "xyz") -> Traversal:
    return Traversal([Scan(load_cloud(e.cloud_path, layout), e.pose, e.timestamp)
                      for e in read_manifest(manifest)])


# ---------------------------------------------------------------- pair pools

@dataclass
class PairPool:
    """Supervision pools over a set of scans indexed ``0..n-1``.

    ``positives`` holds unordered pairs ``(i, j)``, ``i < j``, whose sensor
    centers are at most ``positive_dist`` apart; ``negatives[i]`` lists scans
    farther than ``negative_dist`` from scan ``i``. Pairs in between are
    unused.
    """

    positions: np.ndarray
    positive_dist: float
    negative_dist: float
    positives: np.ndarray
    positive_lists: list[np.ndarray]
    negatives: list[np.ndarray]

    def distance(self, i: int, j: int) -> float:
        return float(np.linalg.norm(self.positions[i] - self.positions[j]))

    def masks(self, indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Positive/negative masks among a batch of scan indices (diagonal excluded)."""
        p = self.positions[np.asarray(indices)]
        d = np.linalg.norm(p[:, None] - p[None], axis=2)
        eye = np.eye(len(p), dtype=bool)
        return (d <= self.positive_dist) & ~eye, d > self.negative_dist


def positions_of(traversals: Sequence[Traversal] | Sequence[PoseSE3]) -> np.ndarray:
    poses: list[PoseSE3] = []
    for t in traversals:
        if isinstance(t, PoseSE3):
            poses.append(t)
        else:
            poses.extend(t.poses)
    return np.array([p.translation for p in poses]).reshape(-1, 3)


def sample_pairs(traversals, positive_dist: float = 2.0, negative_dist: float = 10.0) -> PairPool:
    """Build positive/negative pools from ground-truth centers of all scans (concatenated)."""
    if not positive_dist < negative_dist:
        raise ValueError("positive_dist must be smaller than negative_dist")
    pos = positions_of(traversals)
    tree = cKDTree(pos)
    pairs = np.array(sorted(tree.query_pairs(positive_dist, output_type="set")), dtype=np.int64)
    pairs = pairs.reshape(-1, 2)
    if len(pairs) == 0:
        raise DataError("no positive pairs within the positive distance")
    n = len(pos)
    plists = [[] for _ in range(n)]
    for i, j in pairs:
        plists[i].append(j)
        plists[j].append(i)
    near = tree.query_ball_point(pos, negative_dist)
    negatives = []
    for i in range(n):
        mask = np.ones(n, dtype=bool)
        mask[near[i]] = False
        # query_ball_point is inclusive at the radius; dissimilar means strictly farther
        negatives.append(np.flatnonzero(mask))
    return PairPool(pos, positive_dist, negative_dist, pairs,
                    [np.array(sorted(p), dtype=np.int64) for p in plists], negatives)


# ---------------------------------------------------------------- dataset recipe

@dataclass(frozen=True)
class DatasetSpec:
    """Training world traversals plus a database/query split on a separate world.

    The training world is scanned twice along its whole road loop (the second
    pass with perturbed poses). The evaluation world provides ``db_count``
    database scans and a perturbed second traversal over every
    ``query_stride``-th database pose as queries.
    """

    world: WorldSpec = field(default_factory=WorldSpec)
    scan: ScanSpec = field(default_factory=ScanSpec)
    train_spacing: float = 1.5
    train_count: int = 0
    db_count: int = 200
    db_spacing: float = 1.5
    query_stride: int = 2
    perturb_translation: float = 1.0
    perturb_yaw: float = 15.0


def _world_seed(seed: int, which: int) -> int:
    return int(np.random.SeedSequence([seed, which]).generate_state(1)[0])


def generate_dataset(spec: DatasetSpec, seed: int = 0) -> dict[str, Traversal]:
    """Four traversals keyed ``train_a``, ``train_b``, ``database`` and ``query``."""
    train_world = generate_world(replace(spec.world, seed=_world_seed(seed, 1)))
    eval_world = generate_world(replace(spec.world, seed=_world_seed(seed, 2)))
    count = spec.train_count or int(train_world.road_length / spec.train_spacing)
    pert = (spec.perturb_translation, spec.perturb_yaw)
    train_a = generate_traversal(train_world, TrajectorySpec(count=count, spacing=spec.train_spacing),
                                 spec.scan, seed=_world_seed(seed, 3))
    train_b = generate_traversal(train_world, train_a.poses, spec.scan, seed=_world_seed(seed, 4),
                                 perturbation=pert)
    database = generate_traversal(eval_world, TrajectorySpec(count=spec.db_count,
                                                             spacing=spec.db_spacing),
                                  spec.scan, seed=_world_seed(seed, 5))
    query = generate_traversal(eval_world, database.poses[::spec.query_stride], spec.scan,
                               seed=_world_seed(seed, 6), perturbation=pert)
    return {"train_a": train_a, "train_b": train_b, "database": database, "query": query}

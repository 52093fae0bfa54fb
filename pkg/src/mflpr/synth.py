"""Synthetic worlds of vertical landmarks, a simple range-limited scan renderer,
and a reference/query benchmark generator with known ground truth.

Every landmark's surface points are sampled once, in world coordinates, when
the world is generated. Rendering therefore only selects, perturbs and
re-expresses fixed points, so two sensors at different poses observe exactly
the same world.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError
from .geometry import Pose2D, PointCloud, transform_cloud, write_pointcloud_ascii, write_pointcloud_bin

CYLINDER = "cylinder"
BOX = "box"

# stream tags mixed into per-scan seeds
_REF_STREAM, _QUERY_STREAM, _LAYOUT_STREAM = 1, 2, 3


class EmptyWorldWarning(UserWarning):
    """The generated world has no landmarks, so every scan is empty."""


@dataclass(frozen=True)
class Landmark:
    """A vertical cylinder or a yawed box standing on the ground."""

    x: float
    y: float
    radius: float  # cylinder radius, or box half-width
    z0: float
    z1: float
    kind: str = CYLINDER
    yaw: float = 0.0  # boxes only, degrees
    density: float = 40.0  # surface points per square meter
    intensity: float = 0.5

    def __post_init__(self):
        if not self.radius > 0 or not self.z1 > self.z0:
            raise ParameterError("landmark needs a positive radius and z1 > z0")
        if not self.density > 0:
            raise ParameterError(f"landmark density must be positive, got {self.density}")
        if self.kind not in (CYLINDER, BOX):
            raise ParameterError(f"unknown landmark kind {self.kind!r}")

    def sample_surface(self, rng: np.random.Generator) -> np.ndarray:
        """Points on the vertical walls, ``round(density * area)`` of them."""
        h = self.z1 - self.z0
        if self.kind == CYLINDER:
            n = max(1, int(round(self.density * 2 * math.pi * self.radius * h)))
            ang = rng.uniform(0.0, 2 * math.pi, n)
            local = np.column_stack([self.radius * np.cos(ang), self.radius * np.sin(ang)])
        else:
            side = 2 * self.radius
            n = max(4, int(round(self.density * 4 * side * h)))
            face = rng.integers(0, 4, n)
            t = rng.uniform(-self.radius, self.radius, n)
            r = self.radius
            px = np.choose(face, [np.full(n, r), -t, np.full(n, -r), t])
            py = np.choose(face, [t, np.full(n, r), -t, np.full(n, -r)])
            local = np.column_stack([px, py])
        z = rng.uniform(self.z0, self.z1, len(local))
        xy = Pose2D(self.x, self.y, self.yaw).apply(local)
        return np.column_stack([xy, z])


@dataclass(frozen=True, eq=False)
class WorldModel:
    seed: int
    landmarks: tuple[Landmark, ...]
    extent: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    points: np.ndarray = field(repr=False)  # (P, 3) world-frame surface points
    intensity: np.ndarray = field(repr=False)
    starts: np.ndarray = field(repr=False)  # landmark l owns points[starts[l]:starts[l + 1]]

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.extent
        for lm in self.landmarks:
            if not (xmin <= lm.x <= xmax and ymin <= lm.y <= ymax):
                raise ParameterError(f"landmark at ({lm.x}, {lm.y}) lies outside the world extent")
        for a in (self.points, self.intensity, self.starts):
            a.setflags(write=False)

    @classmethod
    def from_landmarks(cls, landmarks, extent, seed: int = 0) -> "WorldModel":
        """Sample every landmark's surface with a generator derived from ``seed``."""
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
        pts, inten, starts = [], [], [0]
        for lm in landmarks:
            p = lm.sample_surface(rng)
            pts.append(p)
            inten.append(np.full(len(p), lm.intensity))
            starts.append(starts[-1] + len(p))
        points = np.concatenate(pts) if pts else np.zeros((0, 3))
        intensity = np.concatenate(inten) if inten else np.zeros(0)
        return cls(int(seed), tuple(landmarks), tuple(float(v) for v in extent), points, intensity,
                   np.asarray(starts, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.landmarks)


@dataclass(frozen=True)
class SensorModel:
    max_range: float = 30.0
    dropout: float = 0.0
    noise_sigma: float = 0.0
    points_budget: int = 0  # 0 = unlimited

    def __post_init__(self):
        if not self.max_range > 0:
            raise ParameterError(f"max_range must be positive, got {self.max_range}")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.noise_sigma < 0:
            raise ParameterError(f"noise sigma must be >= 0, got {self.noise_sigma}")
        if self.points_budget < 0:
            raise ParameterError(f"points budget must be >= 0, got {self.points_budget}")


@dataclass(frozen=True)
class WorldParams:
    """Landmark placement settings for :func:`generate_world`."""

    extent: tuple[float, float, float, float] = (-30.0, -30.0, 130.0, 70.0)
    n_landmarks: int | None = None  # None: density * area
    landmark_density: float = 0.015  # landmarks per square meter
    min_separation: float = 2.0
    radius_range: tuple[float, float] = (0.3, 1.2)
    height_range: tuple[float, float] = (2.0, 6.0)
    point_density: float = 40.0
    box_fraction: float = 0.4
    path: np.ndarray | None = None  # (K, 2) polyline landmarks must keep clear of
    path_clearance: float = 1.5
    max_tries: int = 2000

    def count(self) -> int:
        if self.n_landmarks is not None:
            return int(self.n_landmarks)
        xmin, ymin, xmax, ymax = self.extent
        return int(round(self.landmark_density * (xmax - xmin) * (ymax - ymin)))


def distance_to_polyline(p: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Distance from each point in ``p`` (M, 2) to the polyline ``poly`` (K, 2)."""
    p = np.atleast_2d(p)
    if len(poly) == 1:
        return np.hypot(*(p - poly[0]).T)
    a, b = poly[:-1], poly[1:]
    ab = b - a
    denom = np.maximum((ab ** 2).sum(1), 1e-300)
    t = np.clip(((p[:, None, :] - a[None]) * ab[None]).sum(-1) / denom[None], 0.0, 1.0)
    nearest = a[None] + t[..., None] * ab[None]
    return np.sqrt(((p[:, None, :] - nearest) ** 2).sum(-1)).min(axis=1)


def generate_world(seed: int, params: WorldParams | None = None) -> WorldModel:
    """Seeded uniform landmark placement with rejection on minimum separation.

    A candidate is rejected if its centre lies within ``min_separation`` of an
    accepted centre, or if its footprint comes within ``path_clearance`` of
    the path. Raises :class:`ParameterError` once one landmark exhausts
    ``max_tries`` candidates.
    """
    p = params or WorldParams()
    n = p.count()
    if n < 0:
        raise ParameterError("landmark count must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _LAYOUT_STREAM]))
    xmin, ymin, xmax, ymax = p.extent
    centres = np.zeros((0, 2))
    landmarks = []
    for k in range(n):
        for _ in range(p.max_tries):
            c = rng.uniform((xmin, ymin), (xmax, ymax))
            r = float(rng.uniform(*p.radius_range))
            if len(centres) and np.hypot(*(centres - c).T).min() < p.min_separation:
                continue
            if p.path is not None and distance_to_polyline(c[None], p.path)[0] < r * math.sqrt(2) + p.path_clearance:
                continue
            break
        else:
            raise ParameterError(f"could not place landmark {k + 1} of {n} after {p.max_tries} tries; "
                                 "lower the density or the minimum separation")
        centres = np.vstack([centres, c])
        kind = BOX if rng.random() < p.box_fraction else CYLINDER
        landmarks.append(Landmark(
            float(c[0]), float(c[1]), r, 0.0, float(rng.uniform(*p.height_range)), kind,
            float(rng.uniform(0.0, 90.0)) if kind == BOX else 0.0, p.point_density, float(rng.uniform()),
        ))
    return WorldModel.from_landmarks(landmarks, p.extent, seed)


def render_scan(world: WorldModel, pose: Pose2D, sensor: SensorModel, seed: int | np.random.SeedSequence = 0
                ) -> PointCloud:
    """Sensor-frame scan of the world from ``pose``.

    Steps, in order: keep points within ``max_range`` (planar distance), drop
    each with probability ``dropout``, subsample to ``points_budget``, add
    isotropic Gaussian noise, transform by the inverse sensor pose.
    """
    rng = np.random.default_rng(seed)
    reach = sensor.max_range
    if len(world.landmarks):
        lx = np.array([lm.x for lm in world.landmarks])
        ly = np.array([lm.y for lm in world.landmarks])
        lr = np.array([lm.radius for lm in world.landmarks]) * math.sqrt(2)
        near = np.nonzero(np.hypot(lx - pose.x, ly - pose.y) <= reach + lr)[0]
    else:
        near = np.zeros(0, dtype=np.int64)
    if len(near):
        idx = np.concatenate([np.arange(world.starts[l], world.starts[l + 1]) for l in near])
    else:
        idx = np.zeros(0, dtype=np.int64)
    pts = world.points[idx]
    idx = idx[np.hypot(pts[:, 0] - pose.x, pts[:, 1] - pose.y) <= reach]
    if sensor.dropout > 0:
        idx = idx[rng.random(len(idx)) >= sensor.dropout]
    if sensor.points_budget and len(idx) > sensor.points_budget:
        idx = np.sort(rng.choice(idx, sensor.points_budget, replace=False))
    xyz = world.points[idx].copy()
    if sensor.noise_sigma > 0:
        xyz += rng.normal(0.0, sensor.noise_sigma, xyz.shape)
    cloud = PointCloud(xyz, world.intensity[idx], "world")
    out = transform_cloud(cloud, pose.inverse())
    return PointCloud(out.xyz, out.intensity, "sensor")


# ----------------------------------------------------------------------------
# benchmark layout
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Layout:
    """Serpentine reference traverse plus perturbed queries."""

    n_ref_scans: int = 200
    ref_scan_spacing: float = 1.0
    lane_length: float = 100.0
    lane_gap: float = 40.0
    n_queries: int = 50
    max_offset: float = 4.0
    yaw_step: float = 10.0
    margin: float = 30.0  # world extends this far beyond the path

    def __post_init__(self):
        if self.n_ref_scans < 1 or self.n_queries < 0:
            raise ParameterError("need at least one reference scan and a non-negative query count")
        if not (self.ref_scan_spacing > 0 and self.lane_length > 0 and self.lane_gap > 0):
            raise ParameterError("spacing, lane length and lane gap must be positive")
        if self.max_offset < 0 or not self.yaw_step > 0:
            raise ParameterError("max_offset must be >= 0 and yaw_step > 0")


def serpentine_path(layout: Layout) -> np.ndarray:
    """Vertices of a boustrophedon polyline long enough for every reference scan."""
    total = (layout.n_ref_scans - 1) * layout.ref_scan_spacing
    verts = [(0.0, 0.0)]
    x, y, length, forward = 0.0, 0.0, 0.0, True
    while length < total:
        x = layout.lane_length if forward else 0.0
        verts.append((x, y))
        length += layout.lane_length
        if length >= total:
            break
        y += layout.lane_gap
        verts.append((x, y))
        length += layout.lane_gap
        forward = not forward
    return np.array(verts)


def poses_along(path: np.ndarray, count: int, spacing: float) -> list[Pose2D]:
    """Poses every ``spacing`` meters of arc length, yawed along the path."""
    seg = np.diff(path, axis=0)
    seg_len = np.hypot(*seg.T)
    cum = np.r_[0.0, np.cumsum(seg_len)]
    out = []
    for i in range(count):
        s = i * spacing
        k = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
        if len(seg) == 0:
            out.append(Pose2D(float(path[0, 0]), float(path[0, 1]), 0.0))
            continue
        x, y = path[k] + (s - cum[k]) * (seg[k] / seg_len[k])
        yaw = round(math.degrees(math.atan2(seg[k, 1], seg[k, 0])), 9)
        out.append(Pose2D(float(x), float(y), yaw))
    return out


@dataclass(frozen=True)
class Benchmark:
    world: WorldModel
    ref_poses: list[Pose2D]
    query_poses: list[Pose2D]
    associations: list[tuple[int, int, float]]  # (query id, nearest ref id, distance)


def plan_benchmark(seed: int, layout: Layout | None = None, world_params: WorldParams | None = None) -> Benchmark:
    """World, reference poses, query poses and nearest-reference associations."""
    layout = layout or Layout()
    path = serpentine_path(layout)
    refs = poses_along(path, layout.n_ref_scans, layout.ref_scan_spacing)
    lo, hi = path.min(axis=0) - layout.margin, path.max(axis=0) + layout.margin
    wp = world_params or WorldParams()
    wp = WorldParams(**{**wp.__dict__, "extent": (lo[0], lo[1], hi[0], hi[1]), "path": path})
    world = generate_world(seed, wp)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _QUERY_STREAM, 0]))
    n_yaw = max(1, int(round(360.0 / layout.yaw_step)))
    queries = []
    for _ in range(layout.n_queries):
        base = refs[int(rng.integers(len(refs)))]
        dx, dy = rng.uniform(-layout.max_offset, layout.max_offset, 2)
        dyaw = int(rng.integers(n_yaw)) * layout.yaw_step
        queries.append(Pose2D(base.x + float(dx), base.y + float(dy), base.yaw + dyaw))
    ref_xy = np.array([[p.x, p.y] for p in refs])
    assoc = []
    for qid, q in enumerate(queries):
        d = np.hypot(ref_xy[:, 0] - q.x, ref_xy[:, 1] - q.y)
        r = int(np.argmin(d))
        assoc.append((qid, r, float(d[r])))
    return Benchmark(world, refs, queries, assoc)


def scan_seed(seed: int, kind: str, scan_id: int) -> np.random.SeedSequence:
    tag = _REF_STREAM if kind == "ref" else _QUERY_STREAM
    return np.random.SeedSequence([int(seed), tag, int(scan_id) + 1])


def generate_benchmark(seed: int, out_dir: str | os.PathLike, layout: Layout | None = None,
                       sensor: SensorModel | None = None, world_params: WorldParams | None = None,
                       scan_format: str = "bin") -> Benchmark:
    """Render a benchmark to disk.

    Writes ``ref/NNNNNN.<ext>``, ``query/NNNNNN.<ext>``, ``ref_poses.csv``,
    ``query_poses.csv`` and ``associations.csv``. Output bytes depend only on
    the arguments.
    """
    from .search import write_poses_csv

    if scan_format not in ("bin", "txt"):
        raise ParameterError(f"scan_format must be 'bin' or 'txt', got {scan_format!r}")
    sensor = sensor or SensorModel()
    bench = plan_benchmark(seed, layout, world_params)
    if len(bench.world) == 0:
        warnings.warn("world has no landmarks; every scan will be empty", EmptyWorldWarning, stacklevel=2)
    out = Path(out_dir)
    try:
        (out / "ref").mkdir(parents=True, exist_ok=True)
        (out / "query").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    writer = write_pointcloud_bin if scan_format == "bin" else write_pointcloud_ascii
    for kind, poses in (("ref", bench.ref_poses), ("query", bench.query_poses)):
        for i, pose in enumerate(poses):
            cloud = render_scan(bench.world, pose, sensor, scan_seed(seed, kind, i))
            writer(out / kind / f"{i:06d}.{scan_format}", cloud)
    write_poses_csv(out / "ref_poses.csv", enumerate(bench.ref_poses))
    write_poses_csv(out / "query_poses.csv", enumerate(bench.query_poses))
    lines = ["query_id,ref_id,distance"] + [f"{q},{r},{d!r}" for q, r, d in bench.associations]
    (out / "associations.csv").write_text("\n".join(lines) + "\n")
    return bench


def params_from_config(cfg) -> tuple[Layout, SensorModel, WorldParams]:
    """Split a :class:`~mflpr.config.Config` into the synth settings objects."""
    layout = Layout(cfg.n_ref_scans, cfg.ref_scan_spacing, cfg.lane_length, cfg.lane_gap, cfg.n_queries,
                    cfg.max_offset, cfg.yaw_step, margin=cfg.max_range)
    sensor = SensorModel(cfg.max_range, cfg.dropout, cfg.noise_sigma, cfg.points_budget)
    world = WorldParams(landmark_density=cfg.landmark_density, min_separation=cfg.min_separation,
                        point_density=cfg.point_density, path_clearance=cfg.path_clearance)
    return layout, sensor, world

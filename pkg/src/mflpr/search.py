"""Two-stage place search over a tiled mosaic of reference descriptors.

Stage 1 correlates the rotated low-resolution query against one mosaic that
packs every reference tile row-major (``ceil(sqrt(N))`` columns), and keeps
the ``n`` references with the highest per-tile maxima. Stage 2 re-runs the
rotation sweep at high resolution against each shortlisted reference alone;
its peak gives the matched reference, the yaw and the in-frame shift.

A surface cell belongs to the tile whose centre ``(tr * L + L // 2, tc * L +
L // 2)`` is nearest; equidistant cells go to the lower tile index.
"""

from __future__ import annotations

import math
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence, Union

import numpy as np

from .config import Config
from .correlation import FFTCorrelator, PeakResult, argmax_surface, better_peak
from .descriptor import (
    BevDescriptor,
    average_pool,
    dump_descriptor,
    load_descriptor_dump,
    make_query_descriptors,
    make_reference_descriptors,
    rotation_angles,
    rotation_family,
)
from .errors import ConfigError, DataError, MalformedFileError, ParameterError
from .geometry import PointCloud, Pose2D
from .metrics import PoseEstimate, shift_to_pose

FORMAT_VERSION = 1

CloudSource = Union[PointCloud, Callable[[], PointCloud]]


@dataclass(frozen=True)
class Candidate:
    reference_id: int
    theta: float
    shift: tuple[int, int]  # low-res cells from the tile centre
    score: float
    tile: int


@dataclass(frozen=True)
class MatchResult:
    reference_id: int
    theta_match: float
    shift: tuple[float, float]  # meters, reference sensor frame
    score: float
    peak: tuple[int, int]
    global_score: float
    tile: int


@dataclass(frozen=True)
class TileMax:
    reference_id: int
    score: float
    i: int
    j: int
    shift: tuple[int, int]


# ----------------------------------------------------------------------------
# tile ownership
# ----------------------------------------------------------------------------

class _AxisTiling:
    """Ownership of surface rows (or columns) by tiles along one axis."""

    def __init__(self, size: int, tiles: int, length: int):
        self.size, self.tiles, self.length = size, tiles, length
        centers = np.arange(tiles) * length + length // 2
        self.centers = centers
        mids = (centers[:-1] + centers[1:]) / 2.0
        self.owner = np.searchsorted(mids, np.arange(size), side="left")
        starts = np.searchsorted(self.owner, np.arange(tiles), side="left")
        self.starts = starts
        self.stops = np.r_[starts[1:], size]
        # all tiles but the first own [off + t*L, off + (t+1)*L); the first also owns [0, off)
        self.off = int(starts[1] - length) if tiles > 1 else 0
        if tiles > 1:
            expect = self.off + np.arange(1, tiles) * length
            if not (0 <= self.off < length and np.array_equal(starts[1:], expect)):
                raise AssertionError("unexpected tile ownership layout")


class TileReducer:
    """Per-tile maxima of a correlation surface, using block reshapes.

    ``tile_max`` accepts a buffer with at least ``H + off`` rows and
    ``W + off`` columns whose top-left ``H x W`` block is the surface; cells
    beyond the surface are overwritten with ``-inf``.
    """

    def __init__(self, shape: tuple[int, int], tiles: tuple[int, int], tile_shape: tuple[int, int]):
        self.shape = shape
        self.rows = _AxisTiling(shape[0], tiles[0], tile_shape[0])
        self.cols = _AxisTiling(shape[1], tiles[1], tile_shape[1])

    def padded(self, surface: np.ndarray) -> np.ndarray:
        H, W = self.shape
        buf = np.full((H + self.rows.length, W + self.cols.length), -np.inf, dtype=surface.dtype)
        buf[:H, :W] = surface
        return buf

    def tile_max(self, buf: np.ndarray) -> np.ndarray:
        r, c = self.rows, self.cols
        H, W = self.shape
        r_end, c_end = r.off + r.tiles * r.length, c.off + c.tiles * c.length
        buf[H:r_end, :c_end] = -np.inf
        buf[:r_end, W:c_end] = -np.inf
        core = buf[r.off:r_end, c.off:c_end]
        out = core.reshape(r.tiles, r.length, -1).max(axis=1)
        out = out.reshape(r.tiles, c.tiles, c.length).max(axis=2)
        if r.off:
            extra = buf[:r.off, c.off:c_end].max(axis=0).reshape(c.tiles, c.length).max(axis=1)
            np.maximum(out[0], extra, out=out[0])
        if c.off:
            extra = buf[r.off:r_end, :c.off].max(axis=1).reshape(r.tiles, r.length).max(axis=1)
            np.maximum(out[:, 0], extra, out=out[:, 0])
        if r.off and c.off:
            out[0, 0] = max(out[0, 0], buf[:r.off, :c.off].max())
        return out

    def window(self, tr: int, tc: int) -> tuple[slice, slice]:
        return (slice(int(self.rows.starts[tr]), int(self.rows.stops[tr])),
                slice(int(self.cols.starts[tc]), int(self.cols.stops[tc])))

    def tile_argmax(self, surface: np.ndarray, tr: int, tc: int) -> tuple[int, int]:
        rs, cs = self.window(tr, tc)
        block = surface[rs, cs]
        a, b = divmod(int(np.argmax(block)), block.shape[1])
        return rs.start + a, cs.start + b


# ----------------------------------------------------------------------------
# reference index
# ----------------------------------------------------------------------------

def mosaic_layout(n: int) -> tuple[int, int]:
    """``(tile_rows, tile_cols)`` of the near-square mosaic for ``n`` references."""
    if n < 1:
        raise ParameterError("a mosaic needs at least one reference")
    cols = math.isqrt(n)
    if cols * cols < n:
        cols += 1
    return -(-n // cols), cols


# poses exactly ``spacing`` apart must survive thinning despite rounding
_SPACING_EPS = 1e-9


def thin_by_spacing(poses: Sequence[Pose2D], spacing: float) -> list[int]:
    """Greedy path-order thinning: keep a pose once it is ``spacing`` from the last kept one."""
    kept: list[int] = []
    for idx, p in enumerate(poses):
        if not kept:
            kept.append(idx)
            continue
        last = poses[kept[-1]]
        if math.hypot(p.x - last.x, p.y - last.y) >= spacing - _SPACING_EPS:
            kept.append(idx)
    return kept


@dataclass(eq=False)
class ReferenceIndex:
    """Mosaic of low-res reference tiles plus per-reference high-res grids and poses.

    Treat as immutable once built; the FFT cache is filled at construction.
    """

    ids: tuple[int, ...]
    poses: tuple[Pose2D, ...]
    high: np.ndarray  # (N, H, W) float32, reference polarity
    mosaic: np.ndarray  # (Tr * L0, Tc * L1) float64
    tiles: tuple[int, int]
    tile_shape: tuple[int, int]
    high_cell_size: float
    low_cell_size: float
    config: Config
    fft_backend: str = "fftw"
    _correlator: FFTCorrelator | None = field(default=None, repr=False)
    _reducer: TileReducer | None = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.ids)
        if n == 0 or len(self.poses) != n or len(self.high) != n:
            raise DataError("index ids, poses and descriptors disagree in length")
        if len(set(self.ids)) != n:
            raise DataError("duplicate reference ids in index")
        if self.tiles[0] * self.tiles[1] < n:
            raise DataError("mosaic has fewer tiles than references")
        expect = (self.tiles[0] * self.tile_shape[0], self.tiles[1] * self.tile_shape[1])
        if self.mosaic.shape != expect:
            raise DataError(f"mosaic shape {self.mosaic.shape} != {expect}")
        if not math.isclose(self.low_cell_size, self.high_cell_size * self.config.u, rel_tol=1e-9):
            raise DataError("low-res cell size must equal high-res cell size times u")
        self._id_to_tile = {rid: t for t, rid in enumerate(self.ids)}
        self._prepare()

    def _prepare(self):
        self._correlator = FFTCorrelator(self.mosaic, self.tile_shape, dtype=np.float32, backend=self.fft_backend)
        self._reducer = TileReducer(self.mosaic.shape, self.tiles, self.tile_shape)

    def __len__(self) -> int:
        return len(self.ids)

    def tile_of(self, reference_id: int) -> int:
        return self._id_to_tile[reference_id]

    def tile_position(self, t: int) -> tuple[int, int]:
        return divmod(t, self.tiles[1])

    def tile_center(self, t: int) -> tuple[int, int]:
        tr, tc = self.tile_position(t)
        L0, L1 = self.tile_shape
        return tr * L0 + L0 // 2, tc * L1 + L1 // 2

    def low_descriptor(self, t: int) -> BevDescriptor:
        tr, tc = self.tile_position(t)
        L0, L1 = self.tile_shape
        return BevDescriptor(self.mosaic[tr * L0:(tr + 1) * L0, tc * L1:(tc + 1) * L1],
                             self.low_cell_size, "low", 1.0, 0.0)

    def high_descriptor(self, t: int) -> BevDescriptor:
        return BevDescriptor(self.high[t], self.high_cell_size, "high", 1.0, 0.0)

    @property
    def correlator(self) -> FFTCorrelator:
        return self._correlator

    @property
    def reducer(self) -> TileReducer:
        return self._reducer


def assemble_mosaic(lows: Sequence[np.ndarray], tiles: tuple[int, int]) -> np.ndarray:
    L0, L1 = lows[0].shape
    mosaic = np.zeros((tiles[0] * L0, tiles[1] * L1))
    for t, low in enumerate(lows):
        tr, tc = divmod(t, tiles[1])
        mosaic[tr * L0:(tr + 1) * L0, tc * L1:(tc + 1) * L1] = low
    return mosaic


def build_reference_index(scans: Iterable[tuple[int, CloudSource, Pose2D]], config: Config | None = None,
                          thin: bool = True) -> ReferenceIndex:
    """Thin the scans by ``config.spacing`` and build the mosaic index.

    ``scans`` yields ``(id, cloud, pose)``; ``cloud`` may be a zero-argument
    callable so that only the kept scans are ever loaded.
    """
    cfg = config or Config()
    scans = list(scans)
    if not scans:
        raise DataError("cannot build an index from zero scans")
    ids = [int(s[0]) for s in scans]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise DataError(f"duplicate scan ids: {dup[:10]}")
    poses = [s[2] for s in scans]
    keep = thin_by_spacing(poses, cfg.spacing) if thin else list(range(len(scans)))
    win, params = cfg.window(), cfg.descriptor_params()
    highs, lows = [], []
    for idx in keep:
        rid, src, _ = scans[idx]
        cloud = src() if callable(src) else src
        hi, lo = make_reference_descriptors(cloud, win, cfg.vx, params, stream_id=rid)
        highs.append(hi.grid.astype(np.float32))
        lows.append(lo.grid)
    tiles = mosaic_layout(len(keep))
    return ReferenceIndex(
        ids=tuple(ids[i] for i in keep),
        poses=tuple(poses[i] for i in keep),
        high=np.stack(highs),
        mosaic=assemble_mosaic(lows, tiles),
        tiles=tiles,
        tile_shape=lows[0].shape,
        high_cell_size=cfg.vx,
        low_cell_size=cfg.vx * cfg.u,
        config=cfg,
    )


# ----------------------------------------------------------------------------
# stage 1
# ----------------------------------------------------------------------------

def per_tile_maxima(surface, index: ReferenceIndex) -> list[TileMax]:
    """Best surface value (and where) among the cells each used tile owns."""
    values = surface.values if hasattr(surface, "values") else np.asarray(surface)
    if values.shape != index.mosaic.shape:
        raise ParameterError(f"surface shape {values.shape} != mosaic shape {index.mosaic.shape}")
    red = index.reducer
    maxima = red.tile_max(red.padded(np.asarray(values, dtype=np.float64)))
    out = []
    for t, rid in enumerate(index.ids):
        tr, tc = index.tile_position(t)
        i, j = red.tile_argmax(values, tr, tc)
        ci, cj = index.tile_center(t)
        out.append(TileMax(rid, float(maxima[tr, tc]), i, j, (i - ci, j - cj)))
    return out


def _low_family(q_low: BevDescriptor, k: float, family: Mapping[float, BevDescriptor] | None):
    if family is None:
        family = rotation_family(q_low, k)
    return family


def _sweep_order(thetas: list[float], family: Mapping[float, BevDescriptor]):
    """Yield ``(theta, partner)`` where partner is theta + 180 if it can reuse theta's spectrum."""
    pending = set(thetas)
    for theta in thetas:
        if theta not in pending:
            continue
        pending.discard(theta)
        opp = (theta + 180.0) % 360.0
        if opp in pending and np.array_equal(family[opp].grid, family[theta].grid[::-1, ::-1]):
            pending.discard(opp)
            yield theta, opp
        else:
            yield theta, None


def global_search(index: ReferenceIndex, q_low: BevDescriptor, k: float, n: int,
                  family: Mapping[float, BevDescriptor] | None = None) -> list[Candidate]:
    """Rotation-swept correlation against the whole mosaic; top ``n`` distinct references."""
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    if q_low.shape != index.tile_shape:
        raise ParameterError(f"query shape {q_low.shape} != tile shape {index.tile_shape}")
    if not math.isclose(q_low.cell_size, index.low_cell_size, rel_tol=1e-9):
        raise ParameterError(f"query cell size {q_low.cell_size} != mosaic cell size {index.low_cell_size}")
    thetas = rotation_angles(k)
    family = _low_family(q_low, k, family)
    corr, red = index.correlator, index.reducer
    Tr, Tc = index.tiles
    H, W = index.mosaic.shape
    N = len(index)
    used = (np.arange(Tr * Tc) < N).reshape(Tr, Tc)
    best = np.full((Tr, Tc), -np.inf)
    best_theta = np.full((Tr, Tc), np.inf)
    best_ij = np.zeros((Tr, Tc, 2), dtype=np.int64)

    def absorb(buf: np.ndarray, theta: float):
        tm = red.tile_max(buf).astype(np.float64)
        upd = used & ((tm > best) | ((tm == best) & (theta < best_theta)))
        if not upd.any():
            return
        surf = buf[:H, :W]
        for tr, tc in zip(*np.nonzero(upd)):
            best_ij[tr, tc] = red.tile_argmax(surf, tr, tc)
        best[upd] = tm[upd]
        best_theta[upd] = theta

    for theta, opp in _sweep_order(thetas, family):
        try:
            spec = corr.spectrum(family[theta].grid)
        except KeyError:
            raise ParameterError(f"rotation family has no entry for theta={theta}") from None
        absorb(corr.buffer(spec), theta)
        if opp is not None:
            absorb(corr.buffer(spec, flipped=True), opp)

    cands = []
    for t in range(N):
        tr, tc = index.tile_position(t)
        ci, cj = index.tile_center(t)
        i, j = best_ij[tr, tc]
        cands.append(Candidate(index.ids[t], float(best_theta[tr, tc]), (int(i - ci), int(j - cj)),
                               float(best[tr, tc]), t))
    cands.sort(key=lambda c: (-c.score, c.tile))
    return cands[:n]


# ----------------------------------------------------------------------------
# stage 2
# ----------------------------------------------------------------------------

def sweep_reference(reference: np.ndarray, family: Mapping[float, BevDescriptor], thetas: list[float],
                    dtype=np.float64) -> PeakResult:
    """Best peak of every rotated query against one reference grid."""
    q0 = family[thetas[0]].grid
    corr = FFTCorrelator(reference, q0.shape, dtype=dtype)
    Hr, Wr = corr.ref_shape
    best = None
    for theta, opp in _sweep_order(thetas, family):
        spec = corr.spectrum(family[theta].grid)
        for th, flip in ((theta, False), (opp, True)):
            if th is None:
                continue
            peak = argmax_surface(corr.buffer(spec, flipped=flip)[:Hr, :Wr], th)
            if better_peak(peak, best):
                best = peak
    return best


def local_search(index: ReferenceIndex, q_high: BevDescriptor | Mapping[float, BevDescriptor],
                 candidates: Sequence[Candidate], k: float) -> MatchResult:
    """High-resolution re-ranking of the shortlisted references.

    Ties on the high-res score go to the higher stage-1 score, then the lower
    reference id.
    """
    if not candidates:
        raise ParameterError("local search needs at least one candidate")
    thetas = rotation_angles(k)
    family = rotation_family(q_high, k) if isinstance(q_high, BevDescriptor) else q_high
    q0 = family[thetas[0]]
    best_key, best = None, None
    for cand in candidates:
        t = index.tile_of(cand.reference_id)
        ref = index.high[t].astype(np.float64)
        if ref.shape != q0.shape:
            raise ParameterError(f"query shape {q0.shape} != reference shape {ref.shape}")
        peak = sweep_reference(ref, family, thetas)
        key = (peak.score, cand.score, -cand.reference_id)
        if best_key is None or key > best_key:
            ci, cj = q0.center
            cs = index.high_cell_size
            best_key = key
            best = MatchResult(cand.reference_id, peak.theta, ((peak.i - ci) * cs, (peak.j - cj) * cs),
                               peak.score, (peak.i, peak.j), cand.score, t)
    return best


# ----------------------------------------------------------------------------
# end to end
# ----------------------------------------------------------------------------

def query_families(q_high: BevDescriptor, k: float, u: int):
    """Rotated high-res queries and their pooled low-res counterparts."""
    high = rotation_family(q_high, k)
    low = {theta: average_pool(d, u) for theta, d in high.items()}
    return high, low


def localize(index: ReferenceIndex, query_cloud: PointCloud, config: Config | None = None) -> PoseEstimate:
    """Descriptor -> global search -> local search -> pose correction.

    Descriptor geometry comes from the index's own configuration; ``config``
    only supplies the search settings ``k`` and ``n``.
    """
    cfg = index.config
    k, n = (config.k, config.n) if config is not None else (cfg.k, cfg.n)
    q_high, _ = make_query_descriptors(query_cloud, cfg.window(), cfg.vx, cfg.descriptor_params())
    low_conf = not q_high.occupied_mask().any()
    fam_high, fam_low = query_families(q_high, k, cfg.u)
    cands = global_search(index, fam_low[0.0], k, n, family=fam_low)
    match = local_search(index, fam_high, cands, k)
    ref_pose = index.poses[match.tile]
    pose = shift_to_pose(ref_pose, match.shift, match.theta_match)
    return PoseEstimate(pose, match.reference_id, match.score, low_conf, match.theta_match, ref_pose, match)


def match_surface(index: ReferenceIndex, query_cloud: PointCloud, estimate: PoseEstimate) -> np.ndarray:
    """High-res correlation surface of the winning rotation (for debugging dumps)."""
    from .correlation import correlate_fft
    from .descriptor import rotate_descriptor

    cfg = index.config
    q_high, _ = make_query_descriptors(query_cloud, cfg.window(), cfg.vx, cfg.descriptor_params())
    t = index.tile_of(estimate.reference_id)
    return correlate_fft(rotate_descriptor(q_high, estimate.theta_match), index.high_descriptor(t)).values


# ----------------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------------

def _manifest_text(index: ReferenceIndex) -> str:
    H, W = index.high.shape[1:]
    lines = [
        f"format_version = {FORMAT_VERSION}",
        f"num_references = {len(index)}",
        f"tile_rows = {index.tiles[0]}",
        f"tile_cols = {index.tiles[1]}",
        f"tile_height = {index.tile_shape[0]}",
        f"tile_width = {index.tile_shape[1]}",
        f"high_height = {H}",
        f"high_width = {W}",
        f"high_cell_size = {index.high_cell_size!r}",
        f"low_cell_size = {index.low_cell_size!r}",
    ]
    lines += [f"config.{line}" for line in index.config.canonical_text().splitlines()]
    return "\n".join(lines) + "\n"


def save_index(index: ReferenceIndex, out_dir: str | os.PathLike) -> Path:
    """Write manifest, mosaic dump, per-reference high-res dumps and ``poses.csv``."""
    out = Path(out_dir)
    (out / "high").mkdir(parents=True, exist_ok=True)
    (out / "manifest.txt").write_text(_manifest_text(index))
    dump_descriptor(out / "mosaic.txt", index.mosaic, index.low_cell_size)
    for t, rid in enumerate(index.ids):
        dump_descriptor(out / "high" / f"{rid}.txt", index.high[t], index.high_cell_size)
    write_poses_csv(out / "poses.csv", zip(index.ids, index.poses))
    return out


def read_manifest(path: str | os.PathLike) -> dict[str, str]:
    from .config import parse_kv

    try:
        return parse_kv(Path(path).read_text(), str(path))
    except ConfigError as exc:
        raise MalformedFileError(str(exc)) from None


def load_index(index_dir: str | os.PathLike) -> ReferenceIndex:
    d = Path(index_dir)
    if not (d / "manifest.txt").is_file():
        raise DataError(f"{d}: no manifest.txt, not an index directory")
    man = read_manifest(d / "manifest.txt")
    version = man.get("format_version")
    if version != str(FORMAT_VERSION):
        raise DataError(f"{d}: index format version {version!r}, expected {FORMAT_VERSION}")
    try:
        cfg = Config().with_overrides({k[7:]: v for k, v in man.items() if k.startswith("config.")})
    except ConfigError as exc:
        raise DataError(f"{d}: bad config echo in manifest: {exc}") from None
    try:
        n = int(man["num_references"])
        tiles = (int(man["tile_rows"]), int(man["tile_cols"]))
        tile_shape = (int(man["tile_height"]), int(man["tile_width"]))
        high_shape = (int(man["high_height"]), int(man["high_width"]))
        hcs, lcs = float(man["high_cell_size"]), float(man["low_cell_size"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{d}: incomplete manifest ({exc})") from None
    mosaic, _ = load_descriptor_dump(d / "mosaic.txt")
    rows = read_poses_csv(d / "poses.csv")
    if len(rows) != n:
        raise DataError(f"{d}: manifest lists {n} references, poses.csv has {len(rows)}")
    high = np.empty((n,) + high_shape, dtype=np.float32)
    for t, (rid, _) in enumerate(rows):
        grid, _ = load_descriptor_dump(d / "high" / f"{rid}.txt")
        if grid.shape != high_shape:
            raise DataError(f"{d}: high-res dump for {rid} has shape {grid.shape}")
        high[t] = grid
    return ReferenceIndex(tuple(r for r, _ in rows), tuple(p for _, p in rows), high, mosaic, tiles,
                          tile_shape, hcs, lcs, cfg)


# ----------------------------------------------------------------------------
# poses CSV: "id,x,y,yaw" with yaw in degrees
# ----------------------------------------------------------------------------

POSES_HEADER = "id,x,y,yaw"


def write_poses_csv(path: str | os.PathLike, rows: Iterable[tuple[int, Pose2D]]) -> None:
    lines = [POSES_HEADER] + [f"{rid},{p.x!r},{p.y!r},{p.yaw!r}" for rid, p in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses_csv(path: str | os.PathLike) -> list[tuple[int, Pose2D]]:
    """Parse a poses / ground-truth CSV; ids must be unique integers."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or [h.strip() for h in lines[0].split(",")] != POSES_HEADER.split(","):
        raise MalformedFileError(f"{path}: header must be '{POSES_HEADER}'")
    out, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        try:
            rid = int(parts[0])
            x, y, yaw = (float(v) for v in parts[1:4])
            if len(parts) != 4:
                raise ValueError
        except (ValueError, IndexError):
            raise MalformedFileError(f"{path}:{lineno}: bad row {line!r}") from None
        if rid in seen:
            raise MalformedFileError(f"{path}:{lineno}: duplicate id {rid}")
        seen.add(rid)
        out.append((rid, Pose2D(x, y, yaw)))
    return out

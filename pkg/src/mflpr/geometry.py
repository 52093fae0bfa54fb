"""Point clouds, scan I/O, planar rigid transforms, cropping and voxelization.

Clouds are stored as numpy arrays rather than per-point objects: ``xyz`` is an
``(N, 3)`` float64 array and ``intensity`` an ``(N,)`` float64 array.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MalformedFileError, ParameterError

# Tolerance used when a grid dimension is derived from a ratio of metric sizes,
# e.g. 36 / 0.3 = 119.99999999999999 must give 120 cells, not 121 or 119.
_DIM_EPS = 1e-9


def grid_cells(extent: float, cell: float) -> int:
    """Number of cells of size ``cell`` covering ``extent`` (robust ceil)."""
    return max(1, int(math.ceil(extent / cell - _DIM_EPS)))


def normalize_yaw(deg: float) -> float:
    """Wrap an angle in degrees to [-180, 180)."""
    out = math.fmod(deg + 180.0, 360.0)
    if out < 0:
        out += 360.0
    out -= 180.0
    # fmod of e.g. -1e-17 can land exactly on 180 after the shift
    return -180.0 if out >= 180.0 else out


@dataclass(frozen=True)
class Pose2D:
    """Planar pose: position in meters, yaw in degrees (normalized to [-180, 180))."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", normalize_yaw(float(self.yaw)))

    def inverse(self) -> "Pose2D":
        c, s = _cos_sin(self.yaw)
        # -R^T t
        return Pose2D(-(c * self.x + s * self.y), -(-s * self.x + c * self.y), -self.yaw)

    def compose(self, other: "Pose2D") -> "Pose2D":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        c, s = _cos_sin(self.yaw)
        return Pose2D(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )

    def apply(self, xy: np.ndarray) -> np.ndarray:
        """Rotate then translate an ``(N, 2)`` array of planar points."""
        c, s = _cos_sin(self.yaw)
        xy = np.asarray(xy, dtype=np.float64)
        out = np.empty_like(xy)
        out[:, 0] = c * xy[:, 0] - s * xy[:, 1] + self.x
        out[:, 1] = s * xy[:, 0] + c * xy[:, 1] + self.y
        return out


def _cos_sin(deg: float) -> tuple[float, float]:
    # exact values at right angles so that 90° turns stay exact
    q, r = divmod(deg, 90.0)
    if r == 0.0:
        return ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))[int(q) % 4]
    rad = math.radians(deg)
    return math.cos(rad), math.sin(rad)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Unordered 3-D points with per-point intensity.

    ``frame`` is ``"sensor"`` or ``"world"``. Arrays are made read-only on
    construction so a cloud can be shared freely.
    """

    xyz: np.ndarray
    intensity: np.ndarray = field(default=None)
    frame: str = "sensor"

    def __post_init__(self):
        xyz = np.array(self.xyz, dtype=np.float64, copy=True).reshape(-1, 3)
        if self.intensity is None:
            inten = np.zeros(len(xyz))
        else:
            inten = np.array(self.intensity, dtype=np.float64, copy=True).reshape(-1)
        if len(inten) != len(xyz):
            raise ParameterError(f"intensity has {len(inten)} entries for {len(xyz)} points")
        if not (np.isfinite(xyz).all() and np.isfinite(inten).all()):
            raise ParameterError("point coordinates and intensities must be finite")
        if self.frame not in ("sensor", "world"):
            raise ParameterError(f"unknown frame {self.frame!r}")
        xyz.setflags(write=False)
        inten.setflags(write=False)
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "intensity", inten)

    def __len__(self) -> int:
        return len(self.xyz)

    @classmethod
    def empty(cls, frame: str = "sensor") -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), frame)

    def subset(self, mask_or_index) -> "PointCloud":
        return PointCloud(self.xyz[mask_or_index], self.intensity[mask_or_index], self.frame)


@dataclass(frozen=True)
class CropWindow:
    """Axis-aligned crop box centred on the sensor in x-y.

    Parameters
    ----------
    wx, wy : float
        Half extents in meters (> 0).
    h1, h2 : float
        Height band in meters, ``h1 < h2``.
    intensity_min : float
        Points with lower intensity are discarded.
    """

    wx: float = 18.0
    wy: float = 18.0
    h1: float = 0.0
    h2: float = 4.0
    intensity_min: float = -math.inf

    def __post_init__(self):
        if not (self.wx > 0 and self.wy > 0):
            raise ParameterError(f"crop half extents must be positive, got wx={self.wx}, wy={self.wy}")
        if not self.h1 < self.h2:
            raise ParameterError(f"crop heights need h1 < h2, got h1={self.h1}, h2={self.h2}")

    def grid_shape(self, vx: float) -> tuple[int, int, int]:
        """Voxel grid dimensions ``(nx, ny, nz)`` for edge length ``vx``."""
        return (
            grid_cells(2 * self.wx, vx),
            grid_cells(2 * self.wy, vx),
            grid_cells(self.h2 - self.h1, vx),
        )


@dataclass(frozen=True, eq=False)
class VoxelSet:
    """Occupied voxels of a cropped cloud.

    ``indices`` is a ``(K, 3)`` int array of unique ``(ix, iy, iz)`` triples in
    lexicographic order, ``counts`` the number of points that fell in each.
    """

    window: CropWindow
    vx: float
    indices: np.ndarray
    counts: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.window.grid_shape(self.vx)

    def as_dict(self) -> dict[tuple[int, int, int], int]:
        return {tuple(int(v) for v in idx): int(c) for idx, c in zip(self.indices, self.counts)}


# ----------------------------------------------------------------------------
# I/O
# ----------------------------------------------------------------------------

_RECORD = np.dtype("<f4")


def load_pointcloud_bin(path: str | os.PathLike) -> PointCloud:
    """Read a headerless little-endian float32 ``x y z intensity`` scan."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise MalformedFileError(f"{path}: size {len(raw)} bytes is not a multiple of 16")
    data = np.frombuffer(raw, dtype=_RECORD).reshape(-1, 4).astype(np.float64)
    bad = ~np.isfinite(data).all(axis=1)
    if bad.any():
        rec = int(np.flatnonzero(bad)[0])
        raise MalformedFileError(f"{path}: non-finite value in record {rec}")
    return PointCloud(data[:, :3], data[:, 3], "sensor")


def write_pointcloud_bin(path: str | os.PathLike, pc: PointCloud) -> None:
    data = np.empty((len(pc), 4), dtype=_RECORD)
    data[:, :3] = pc.xyz
    data[:, 3] = pc.intensity
    Path(path).write_bytes(data.tobytes())


def load_pointcloud_ascii(path: str | os.PathLike) -> PointCloud:
    """Read ``x y z [intensity]`` lines; blank lines and ``#`` comments are skipped."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            if len(parts) not in (3, 4):
                raise MalformedFileError(f"{path}:{lineno}: expected 3 or 4 numbers, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise MalformedFileError(f"{path}:{lineno}: cannot parse {body!r}") from None
            if not all(math.isfinite(v) for v in vals):
                raise MalformedFileError(f"{path}:{lineno}: non-finite value")
            if len(vals) == 3:
                vals.append(0.0)
            rows.append(vals)
    arr = np.array(rows, dtype=np.float64).reshape(-1, 4)
    return PointCloud(arr[:, :3], arr[:, 3], "sensor")


def write_pointcloud_ascii(path: str | os.PathLike, pc: PointCloud) -> None:
    with open(path, "w") as fh:
        for (x, y, z), i in zip(pc.xyz.tolist(), pc.intensity.tolist()):
            fh.write(f"{x!r} {y!r} {z!r} {i!r}\n")


def load_pointcloud(path: str | os.PathLike) -> PointCloud:
    """Dispatch on extension: ``.bin`` is binary, anything else ASCII."""
    if Path(path).suffix.lower() == ".bin":
        return load_pointcloud_bin(path)
    return load_pointcloud_ascii(path)


# ----------------------------------------------------------------------------
# Operations
# ----------------------------------------------------------------------------

def crop_window(pc: PointCloud, win: CropWindow) -> PointCloud:
    """Keep points inside the closed crop box; order is preserved."""
    x, y, z = pc.xyz.T
    keep = (
        (x >= -win.wx) & (x <= win.wx)
        & (y >= -win.wy) & (y <= win.wy)
        & (z >= win.h1) & (z <= win.h2)
        & (pc.intensity >= win.intensity_min)
    )
    return pc.subset(keep)


def voxelize(pc: PointCloud, win: CropWindow, vx: float) -> VoxelSet:
    """Bin a cropped cloud into cubic voxels anchored at ``(-wx, -wy, h1)``.

    Indices are clamped into the grid, so points exactly on the far boundary
    land in the last cell.
    """
    if not vx > 0:
        raise ParameterError(f"voxel size must be positive, got {vx}")
    nx, ny, nz = win.grid_shape(vx)
    if len(pc) == 0:
        return VoxelSet(win, vx, np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64))
    x, y, z = pc.xyz.T
    idx = np.empty((len(pc), 3), dtype=np.int64)
    idx[:, 0] = np.clip(np.floor((x + win.wx) / vx), 0, nx - 1)
    idx[:, 1] = np.clip(np.floor((y + win.wy) / vx), 0, ny - 1)
    idx[:, 2] = np.clip(np.floor((z - win.h1) / vx), 0, nz - 1)
    uniq, counts = np.unique(idx, axis=0, return_counts=True)
    return VoxelSet(win, vx, uniq, counts)


def transform_cloud(pc: PointCloud, pose: Pose2D) -> PointCloud:
    """Rotate each point's x-y by ``pose.yaw`` then translate by ``(pose.x, pose.y)``."""
    xyz = pc.xyz.copy()
    if len(xyz):
        xyz[:, :2] = pose.apply(xyz[:, :2])
    return PointCloud(xyz, pc.intensity, pc.frame)

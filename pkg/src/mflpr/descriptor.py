"""BEV occupancy descriptors.

Pipeline: voxel set -> height density map -> thresholded occupancy grid ->
(references only) per-patch random downsampling -> average pooling.

Grid layout: ``grid[i, j]`` with ``i`` along sensor +x (voxel ``ix``) and ``j``
along sensor +y (voxel ``iy``). Rotations are counter-clockwise in that
``(i, j)`` frame, which is counter-clockwise about the sensor's +z axis.

Random downsampling protocol
----------------------------
Each scan gets its own PCG64 stream seeded with ``SeedSequence([rng_seed,
stream_id])`` (see :func:`scan_rng`). Patches are visited in row-major patch
order; for every patch holding more than ``c`` occupied cells, the occupied
cells are listed in row-major order within the patch, the generator's
``permutation(len(cells))`` is drawn, and the first ``c`` entries of that
permutation select the cells that stay occupied. Patches at or under the cap
draw nothing from the stream.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import MalformedFileError, ParameterError
from .geometry import CropWindow, PointCloud, VoxelSet, crop_window, voxelize

QUERY = "query"
REFERENCE = "reference"


@dataclass(frozen=True, eq=False)
class BevDescriptor:
    """A 2-D BEV grid plus the metadata needed to interpret it."""

    grid: np.ndarray
    cell_size: float
    resolution: str = "high"
    occupied_value: float = 1.0
    unoccupied_value: float = 0.0

    def __post_init__(self):
        g = np.array(self.grid, dtype=np.float64, copy=True)
        if g.ndim != 2 or min(g.shape) < 1:
            raise ParameterError(f"descriptor grid must be 2-D and non-empty, got shape {g.shape}")
        if not self.cell_size > 0:
            raise ParameterError(f"cell size must be positive, got {self.cell_size}")
        if self.resolution not in ("high", "low"):
            raise ParameterError(f"unknown resolution tag {self.resolution!r}")
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def center(self) -> tuple[int, int]:
        """Cell that marks the descriptor centre for correlation offsets."""
        return self.grid.shape[0] // 2, self.grid.shape[1] // 2

    def occupied_mask(self) -> np.ndarray:
        return self.grid == self.occupied_value

    def with_grid(self, grid: np.ndarray) -> "BevDescriptor":
        return replace(self, grid=grid)


@dataclass(frozen=True)
class DescriptorParams:
    """Descriptor hyperparameters.

    d : occupancy threshold on the height density (strictly greater is occupied)
    w : value of unoccupied query cells
    m : patch edge for reference downsampling, in cells
    c : maximum occupied cells kept per patch
    u : average-pooling edge
    rng_seed : base seed for patch downsampling
    """

    d: int = 2
    w: float = -0.15
    m: int = 10
    c: int = 20
    u: int = 2
    rng_seed: int = 0

    def __post_init__(self):
        if self.d < 0:
            raise ParameterError(f"density threshold d must be >= 0, got {self.d}")
        if self.m < 1 or self.u < 1:
            raise ParameterError(f"patch edge m and pooling edge u must be >= 1 (m={self.m}, u={self.u})")
        if self.c < 0:
            raise ParameterError(f"patch cap c must be >= 0, got {self.c}")


def scan_rng(rng_seed: int, stream_id: int) -> np.random.Generator:
    """Independent, reproducible generator for one scan."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(rng_seed), int(stream_id)])))


def height_density_map(v: VoxelSet) -> np.ndarray:
    """Count occupied z-voxels per ``(ix, iy)`` column."""
    nx, ny, _ = v.shape
    hdm = np.zeros((nx, ny), dtype=np.int64)
    if len(v.indices):
        np.add.at(hdm, (v.indices[:, 0], v.indices[:, 1]), 1)
    return hdm


def threshold_occupancy(hdm: np.ndarray, params: DescriptorParams, polarity: str = QUERY,
                        cell_size: float = 1.0) -> BevDescriptor:
    """Occupied (1) where density exceeds ``d``; unoccupied is ``w`` for queries, 0 for references."""
    if polarity == QUERY:
        unocc = float(params.w)
    elif polarity == REFERENCE:
        unocc = 0.0
    else:
        raise ParameterError(f"unknown polarity {polarity!r}")
    grid = np.where(np.asarray(hdm) > params.d, 1.0, unocc)
    return BevDescriptor(grid, cell_size, "high", 1.0, unocc)


def patch_downsample(desc: BevDescriptor, params: DescriptorParams, rng: np.random.Generator) -> BevDescriptor:
    """Cap the number of occupied cells in every ``m x m`` patch at ``c``."""
    m, cap = params.m, params.c
    occ = desc.occupied_mask()
    H, W = occ.shape
    out = desc.grid.copy()
    for r0 in range(0, H, m):
        for c0 in range(0, W, m):
            patch = occ[r0:r0 + m, c0:c0 + m]
            n_occ = int(np.count_nonzero(patch))
            if n_occ <= cap:
                continue
            pr, pc = np.nonzero(patch)  # row-major order
            drop = rng.permutation(n_occ)[cap:]
            out[r0 + pr[drop], c0 + pc[drop]] = desc.unoccupied_value
    return desc.with_grid(out)


def average_pool(desc: BevDescriptor, u: int) -> BevDescriptor:
    """Mean over non-overlapping ``u x u`` blocks; ragged edges are padded with the unoccupied value."""
    if u < 1:
        raise ParameterError(f"pooling edge must be >= 1, got {u}")
    g = desc.grid
    H, W = g.shape
    Hp, Wp = -(-H // u) * u, -(-W // u) * u
    if (Hp, Wp) != (H, W):
        g = np.pad(g, ((0, Hp - H), (0, Wp - W)), constant_values=desc.unoccupied_value)
    pooled = g.reshape(Hp // u, u, Wp // u, u).mean(axis=(1, 3))
    return BevDescriptor(pooled, desc.cell_size * u, "low", desc.occupied_value, desc.unoccupied_value)


def _rotate_grid_nn(grid: np.ndarray, theta: float, fill: float) -> np.ndarray:
    """Inverse-mapping nearest-neighbour rotation about the grid centre."""
    H, W = grid.shape
    ci, cj = (H - 1) / 2.0, (W - 1) / 2.0
    rad = math.radians(theta)
    c, s = math.cos(rad), math.sin(rad)
    ii, jj = np.meshgrid(np.arange(H) - ci, np.arange(W) - cj, indexing="ij")
    # source = R(-theta) @ (dest - centre) + centre
    si = np.floor(c * ii + s * jj + ci + 0.5).astype(np.int64)
    sj = np.floor(-s * ii + c * jj + cj + 0.5).astype(np.int64)
    inside = (si >= 0) & (si < H) & (sj >= 0) & (sj < W)
    out = np.full_like(grid, fill)
    out[inside] = grid[si[inside], sj[inside]]
    return out


def rotate_descriptor(desc: BevDescriptor, theta: float) -> BevDescriptor:
    """Rotate the grid content counter-clockwise by ``theta`` degrees.

    On square grids the angle is split into a residual in [0, 90), sampled
    nearest-neighbour, followed by whole quarter turns done exactly with
    ``np.rot90``. Applying the quarter turns last makes
    ``rotate(theta + 180) == rot180(rotate(theta))`` hold bit for bit.
    Cells that map outside the source take the unoccupied value.
    """
    theta = float(theta) % 360.0
    g = desc.grid
    H, W = g.shape
    if H == W:
        quarters, resid = divmod(theta, 90.0)
        out = _rotate_grid_nn(g, resid, desc.unoccupied_value) if resid else g
        if quarters:
            out = np.rot90(out, int(quarters))
        return desc.with_grid(out)
    if theta == 0.0:
        return desc
    return desc.with_grid(_rotate_grid_nn(g, theta, desc.unoccupied_value))


def rotation_family(desc: BevDescriptor, k: float) -> dict[float, BevDescriptor]:
    """``{theta: rotate_descriptor(desc, theta)}`` for theta in 0, k, ..., 360-k."""
    return {theta: rotate_descriptor(desc, theta) for theta in rotation_angles(k)}


def rotation_angles(k: float) -> list[float]:
    """Sweep angles for increment ``k``; ``k`` must divide 360."""
    if not k > 0:
        raise ParameterError(f"rotation increment must be positive, got {k}")
    steps = 360.0 / k
    n = int(round(steps))
    if n < 1 or abs(steps - n) > 1e-9:
        raise ParameterError(f"rotation increment {k} does not divide 360")
    return [float(i * k) for i in range(n)]


def _bev(cloud: PointCloud, win: CropWindow, vx: float, params: DescriptorParams, polarity: str) -> BevDescriptor:
    hdm = height_density_map(voxelize(crop_window(cloud, win), win, vx))
    return threshold_occupancy(hdm, params, polarity, cell_size=vx)


def make_reference_descriptors(cloud: PointCloud, win: CropWindow, vx: float, params: DescriptorParams,
                               stream_id: int = 0) -> tuple[BevDescriptor, BevDescriptor]:
    """High- and low-resolution descriptors for a reference scan (patch-downsampled)."""
    high = _bev(cloud, win, vx, params, REFERENCE)
    high = patch_downsample(high, params, scan_rng(params.rng_seed, stream_id))
    return high, average_pool(high, params.u)


def make_query_descriptors(cloud: PointCloud, win: CropWindow, vx: float,
                           params: DescriptorParams) -> tuple[BevDescriptor, BevDescriptor]:
    """High- and low-resolution descriptors for a query scan (unoccupied = ``w``)."""
    high = _bev(cloud, win, vx, params, QUERY)
    return high, average_pool(high, params.u)


# ----------------------------------------------------------------------------
# text dump: "H W cell_size" header, then one row of values per line
# ----------------------------------------------------------------------------

def format_grid(grid: np.ndarray, cell_size: float) -> str:
    H, W = grid.shape
    lines = [f"{H} {W} {cell_size!r}"]
    lines.extend(" ".join(repr(float(v)) for v in row) for row in grid)
    return "\n".join(lines) + "\n"


def dump_descriptor(path: str | os.PathLike, grid: np.ndarray, cell_size: float) -> None:
    Path(path).write_text(format_grid(np.asarray(grid), cell_size))


def load_descriptor_dump(path: str | os.PathLike) -> tuple[np.ndarray, float]:
    """Inverse of :func:`dump_descriptor`; returns ``(grid, cell_size)``."""
    with open(path) as fh:
        header = fh.readline().split()
        try:
            H, W, cell = int(header[0]), int(header[1]), float(header[2])
        except (IndexError, ValueError):
            raise MalformedFileError(f"{path}: bad descriptor header {header!r}") from None
        try:
            grid = np.loadtxt(fh, dtype=np.float64, ndmin=2)
        except ValueError as exc:
            raise MalformedFileError(f"{path}: {exc}") from None
    if grid.shape != (H, W):
        raise MalformedFileError(f"{path}: header says {H}x{W}, body is {grid.shape[0]}x{grid.shape[1]}")
    return grid, cell

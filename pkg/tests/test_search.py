import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mflpr.config import Config
from mflpr.descriptor import BevDescriptor
from mflpr.errors import DataError, MalformedFileError, ParameterError
from mflpr.geometry import PointCloud, Pose2D
from mflpr.metrics import rre, rte
from mflpr.search import (
    Candidate,
    ReferenceIndex,
    assemble_mosaic,
    build_reference_index,
    global_search,
    load_index,
    local_search,
    localize,
    mosaic_layout,
    per_tile_maxima,
    read_poses_csv,
    save_index,
    thin_by_spacing,
    write_poses_csv,
)
from mflpr.synth import SensorModel, render_scan

CFG = Config()  # vx 0.3, u 2


def make_index(lows, highs=None, ids=None):
    """Hand-built index over the given low-res tiles (high-res grids default to zeros)."""
    n = len(lows)
    L = lows[0].shape
    if highs is None:
        highs = [np.zeros((2 * L[0], 2 * L[1]))] * n
    tiles = mosaic_layout(n)
    return ReferenceIndex(
        ids=tuple(ids if ids is not None else range(n)),
        poses=tuple(Pose2D(10.0 * t, 0.0, 0.0) for t in range(n)),
        high=np.stack(highs).astype(np.float32),
        mosaic=assemble_mosaic(lows, tiles),
        tiles=tiles,
        tile_shape=L,
        high_cell_size=CFG.vx,
        low_cell_size=CFG.vx * CFG.u,
        config=CFG,
    )


def low_desc(grid):
    return BevDescriptor(np.asarray(grid, dtype=float), CFG.vx * CFG.u)


def random_tiles(n, shape, seed, p=0.3):
    rng = np.random.default_rng(seed)
    return [(rng.random(shape) < p).astype(float) for _ in range(n)]


# -- thinning and layout -------------------------------------------------------------

def test_thinning_keeps_every_other_scan():
    poses = [Pose2D(float(i), 0.0) for i in range(10)]
    assert thin_by_spacing(poses, 2.0) == [0, 2, 4, 6, 8]


def test_thinning_zero_spacing_keeps_all():
    poses = [Pose2D(0.0, 0.0)] * 4
    assert thin_by_spacing(poses, 0.0) == [0, 1, 2, 3]


def test_thinning_survives_rounding():
    poses = [Pose2D(0.3 * i, 0.0) for i in range(7)]  # 0.3 * 3 - 0.3 * 2 rounds below 0.3
    assert 0.3 * 3 - 0.3 * 2 < 0.3
    assert thin_by_spacing(poses, 0.3) == list(range(7))


@pytest.mark.parametrize("n, expect", [(1, (1, 1)), (4, (2, 2)), (5, (2, 3)), (10, (3, 4)), (100, (10, 10))])
def test_mosaic_layout(n, expect):
    assert mosaic_layout(n) == expect


def test_mosaic_layout_rejects_zero():
    with pytest.raises(ParameterError):
        mosaic_layout(0)


# -- per-tile maxima -------------------------------------------------------------

def owner_oracle(shape, tiles, tile_shape):
    """Tile index owning each cell: nearest centre, ties to the lower row-major index."""
    Tr, Tc = tiles
    L0, L1 = tile_shape
    centers = [(tr * L0 + L0 // 2, tc * L1 + L1 // 2) for tr in range(Tr) for tc in range(Tc)]
    owner = np.empty(shape, dtype=int)
    for i in range(shape[0]):
        for j in range(shape[1]):
            d = [(i - a) ** 2 + (j - b) ** 2 for a, b in centers]
            owner[i, j] = int(np.argmin(d))
    return owner


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 7), st.integers(3, 9), st.integers(3, 9), st.integers(0, 2**31))
def test_per_tile_maxima_matches_ownership_oracle(n, l0, l1, seed):
    lows = random_tiles(n, (l0, l1), seed)
    index = make_index(lows, highs=[np.zeros((2 * l0, 2 * l1))] * n)
    surface = np.random.default_rng(seed + 1).integers(0, 5, index.mosaic.shape).astype(float)
    owner = owner_oracle(index.mosaic.shape, index.tiles, index.tile_shape)
    got = per_tile_maxima(surface, index)
    assert [g.reference_id for g in got] == list(range(n))
    for t, g in enumerate(got):
        cells = np.argwhere(owner == t)
        vals = surface[owner == t]
        assert g.score == vals.max()
        first = cells[np.argmax(vals)]  # row-major first maximum
        assert (g.i, g.j) == tuple(first)
        ci, cj = index.tile_center(t)
        assert g.shift == (g.i - ci, g.j - cj)


def test_single_tile_is_global_argmax():
    index = make_index(random_tiles(1, (6, 6), 0))
    s = np.random.default_rng(1).random((6, 6))
    (g,) = per_tile_maxima(s, index)
    assert (g.i, g.j) == np.unravel_index(np.argmax(s), s.shape)


def test_equidistant_cell_goes_to_lower_tile():
    # tiles of width 4 centred on columns 2 and 6; column 4 is equidistant
    index = make_index(random_tiles(2, (4, 4), 0))
    s = np.zeros(index.mosaic.shape)
    s[0, 4] = 9.0
    a, b = per_tile_maxima(s, index)
    assert (a.score, b.score) == (9.0, 0.0)


def test_planted_peaks_land_in_their_tiles():
    index = make_index(random_tiles(4, (10, 10), 2))
    s = np.zeros(index.mosaic.shape)
    plants = {0: (3, 7, 1.0), 1: (5, 14, 2.0), 2: (12, 2, 3.0), 3: (17, 17, 4.0)}
    for i, j, v in plants.values():
        s[i, j] = v
    for t, g in enumerate(per_tile_maxima(s, index)):
        assert (g.i, g.j, g.score) == plants[t]


def test_per_tile_maxima_rejects_wrong_shape():
    index = make_index(random_tiles(2, (4, 4), 0))
    with pytest.raises(ParameterError):
        per_tile_maxima(np.zeros((3, 3)), index)


# -- global search -----------------------------------------------------------------

def test_global_search_finds_identical_tile():
    lows = random_tiles(5, (12, 12), 3)
    index = make_index(lows)
    for t in range(5):
        (best,) = global_search(index, low_desc(lows[t]), 90.0, 1)
        assert (best.reference_id, best.theta, best.shift) == (t, 0.0, (0, 0))


def test_global_search_reports_shift():
    lows = random_tiles(4, (16, 16), 4)
    index = make_index(lows)
    q = np.zeros((16, 16))
    q[:-3] = lows[2][3:]  # scene appears 3 rows earlier: query displaced +3 rows
    (best,) = global_search(index, low_desc(q), 90.0, 1)
    assert (best.reference_id, best.theta, best.shift) == (2, 0.0, (3, 0))


def test_global_search_finds_rotated_tile():
    lows = random_tiles(4, (12, 12), 5)
    index = make_index(lows)
    (best,) = global_search(index, low_desc(np.rot90(lows[1], -1)), 90.0, 1)
    assert (best.reference_id, best.theta) == (1, 90.0)


def test_global_search_shortlist_is_sorted_and_bounded():
    index = make_index(random_tiles(7, (8, 8), 6))
    q = low_desc(random_tiles(1, (8, 8), 7)[0])
    cands = global_search(index, q, 30.0, 4)
    assert len(cands) == 4
    assert len({c.reference_id for c in cands}) == 4
    assert all(a.score >= b.score for a, b in zip(cands, cands[1:]))
    assert len(global_search(index, q, 30.0, 50)) == 7


def test_global_search_validates_inputs():
    index = make_index(random_tiles(2, (8, 8), 0))
    with pytest.raises(ParameterError):
        global_search(index, low_desc(np.zeros((9, 8))), 10.0, 1)
    with pytest.raises(ParameterError):
        global_search(index, BevDescriptor(np.zeros((8, 8)), 0.3), 10.0, 1)
    with pytest.raises(ParameterError):
        global_search(index, low_desc(np.zeros((8, 8))), 10.0, 0)


# -- local search ---------------------------------------------------------------------

def test_local_search_reranks_by_high_resolution_score():
    highs = random_tiles(2, (16, 16), 8)
    index = make_index(random_tiles(2, (8, 8), 9), highs=highs)
    cands = [Candidate(0, 0.0, (0, 0), 10.0, 0), Candidate(1, 0.0, (0, 0), 1.0, 1)]
    m = local_search(index, BevDescriptor(highs[1], CFG.vx), cands, 90.0)
    assert (m.reference_id, m.theta_match, m.shift) == (1, 0.0, (0.0, 0.0))
    assert m.score == pytest.approx(highs[1].sum())


def test_local_search_ties_prefer_stage_one_score_then_lower_id():
    g = random_tiles(1, (16, 16), 10)[0]
    index = make_index(random_tiles(3, (8, 8), 11), highs=[g, g, g], ids=[5, 3, 9])
    q = BevDescriptor(g, CFG.vx)
    cands = [Candidate(5, 0.0, (0, 0), 1.0, 0), Candidate(9, 0.0, (0, 0), 2.0, 2)]
    assert local_search(index, q, cands, 90.0).reference_id == 9
    cands = [Candidate(9, 0.0, (0, 0), 1.0, 2), Candidate(3, 0.0, (0, 0), 1.0, 1)]
    assert local_search(index, q, cands, 90.0).reference_id == 3


def test_local_search_needs_candidates():
    index = make_index(random_tiles(1, (8, 8), 0))
    with pytest.raises(ParameterError):
        local_search(index, BevDescriptor(np.zeros((16, 16)), CFG.vx), [], 10.0)


# -- end to end on a small synthetic traverse ---------------------------------------

def test_index_thins_to_spacing(small_index, small_scans):
    assert len(small_index) == len(small_scans)  # scans already 2 m apart
    assert small_index.tiles == mosaic_layout(len(small_scans))
    assert small_index.tile_shape == (60, 60)
    assert small_index.high.shape == (len(small_scans), 120, 120)


def test_localize_reference_scan_returns_its_pose(small_index, small_scans):
    for rid in (0, 7, 13):
        _, cloud, pose = small_scans[rid]
        est = localize(small_index, cloud)
        assert est.reference_id == rid
        assert est.theta_match == 0.0
        assert rte(est.pose, pose) < 1e-9 and rre(est.pose, pose) < 1e-9
        assert not est.low_confidence


@pytest.mark.parametrize("dx, dy, dyaw", [(2.0, -1.5, 0.0), (0.0, 0.0, 40.0), (-1.0, 2.5, -130.0), (1.2, 0.0, 0.0)])
def test_localize_offset_query(small_index, small_bench, dx, dy, dyaw):
    ref = small_bench.ref_poses[9]
    truth = Pose2D(ref.x + dx, ref.y + dy, ref.yaw + dyaw)
    cloud = render_scan(small_bench.world, truth, SensorModel(), seed=123)
    est = localize(small_index, cloud)
    assert rte(est.pose, truth) <= math.sqrt(2) * CFG.vx
    assert rre(est.pose, truth) <= 5.0


def test_localize_deterministic(small_index, small_bench):
    ref = small_bench.ref_poses[4]
    cloud = render_scan(small_bench.world, Pose2D(ref.x + 0.7, ref.y - 0.4, ref.yaw + 20), SensorModel(), 5)
    a, b = localize(small_index, cloud), localize(small_index, cloud)
    assert (a.pose, a.reference_id, a.score, a.theta_match) == (b.pose, b.reference_id, b.score, b.theta_match)


def test_localize_empty_query_is_low_confidence(small_index):
    est = localize(small_index, PointCloud.empty())
    assert est.low_confidence
    assert est.reference_id in small_index.ids


def test_search_settings_override(small_index, small_scans):
    _, cloud, pose = small_scans[3]
    est = localize(small_index, cloud, Config(k=30.0, n=1))
    assert est.reference_id == 3


# -- build and persistence ------------------------------------------------------------

def test_build_rejects_empty_and_duplicates(small_scans):
    with pytest.raises(DataError):
        build_reference_index([], CFG)
    with pytest.raises(DataError, match="duplicate"):
        build_reference_index([small_scans[0], small_scans[0]], CFG)


def test_build_loads_only_kept_scans(small_scans):
    loaded = []

    def source(i, cloud):
        def load():
            loaded.append(i)
            return cloud
        return load

    scans = [(i, source(i, c), Pose2D(float(i), 0.0)) for i, c, _ in small_scans[:6]]
    index = build_reference_index(scans, CFG)
    assert index.ids == (0, 2, 4)
    assert loaded == [0, 2, 4]


def test_save_load_roundtrip(tmp_path, small_index, small_scans):
    save_index(small_index, tmp_path / "idx")
    back = load_index(tmp_path / "idx")
    assert back.ids == small_index.ids
    assert back.poses == small_index.poses
    assert back.config == small_index.config
    assert (back.tiles, back.tile_shape) == (small_index.tiles, small_index.tile_shape)
    np.testing.assert_array_equal(back.mosaic, small_index.mosaic)
    np.testing.assert_array_equal(back.high, small_index.high)
    _, cloud, _ = small_scans[5]
    a, b = localize(small_index, cloud), localize(back, cloud)
    assert (a.reference_id, a.pose) == (b.reference_id, b.pose)


def test_load_rejects_other_format_version(tmp_path, small_index):
    d = save_index(small_index, tmp_path / "idx")
    text = (d / "manifest.txt").read_text()
    (d / "manifest.txt").write_text(text.replace("format_version = 1", "format_version = 2"))
    with pytest.raises(DataError, match="version"):
        load_index(d)


def test_load_rejects_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        load_index(tmp_path)


def test_poses_csv_roundtrip(tmp_path):
    rows = [(3, Pose2D(1.25, -2.0, 30.0)), (8, Pose2D(0.1, 0.2, -179.5))]
    write_poses_csv(tmp_path / "p.csv", rows)
    assert read_poses_csv(tmp_path / "p.csv") == rows


def test_poses_csv_rejects_duplicates_and_bad_header(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("id,x,y,yaw\n1,0,0,0\n1,1,1,1\n")
    with pytest.raises(MalformedFileError, match="duplicate"):
        read_poses_csv(p)
    p.write_text("x,y\n1,2\n")
    with pytest.raises(MalformedFileError, match="header"):
        read_poses_csv(p)

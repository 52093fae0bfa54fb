import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mflpr.errors import ParameterError
from mflpr.geometry import Pose2D, load_pointcloud, transform_cloud
from mflpr.synth import (
    BOX,
    EmptyWorldWarning,
    Landmark,
    Layout,
    SensorModel,
    WorldModel,
    WorldParams,
    distance_to_polyline,
    generate_benchmark,
    generate_world,
    plan_benchmark,
    poses_along,
    render_scan,
    serpentine_path,
)

SMALL = WorldParams(extent=(0.0, 0.0, 60.0, 60.0), landmark_density=0.01)
TINY_LAYOUT = Layout(n_ref_scans=6, ref_scan_spacing=1.0, lane_length=20.0, n_queries=3, margin=10.0)


def sorted_rows(a):
    return a[np.lexsort(a.T[::-1])]


# -- world ------------------------------------------------------------------------

def test_world_is_seeded():
    a, b = generate_world(4, SMALL), generate_world(4, SMALL)
    assert a.landmarks == b.landmarks
    np.testing.assert_array_equal(a.points, b.points)
    assert generate_world(5, SMALL).landmarks != a.landmarks


def test_world_count_follows_density():
    assert len(generate_world(0, SMALL)) == 36


def test_world_with_no_landmarks():
    w = generate_world(0, WorldParams(extent=(0, 0, 10, 10), n_landmarks=0))
    assert len(w) == 0 and w.points.shape == (0, 3)
    assert len(render_scan(w, Pose2D(), SensorModel())) == 0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_world_respects_minimum_separation(seed):
    w = generate_world(seed, SMALL)
    xy = np.array([[lm.x, lm.y] for lm in w.landmarks])
    d = np.hypot(*(xy[:, None] - xy[None]).transpose(2, 0, 1))
    np.fill_diagonal(d, np.inf)
    assert d.min() >= SMALL.min_separation


def test_world_keeps_path_clear():
    path = np.array([[0.0, 30.0], [60.0, 30.0]])
    p = WorldParams(extent=(0.0, 0.0, 60.0, 60.0), landmark_density=0.01, path=path, path_clearance=1.5)
    w = generate_world(1, p)
    for lm in w.landmarks:
        assert distance_to_polyline(np.array([[lm.x, lm.y]]), path)[0] >= lm.radius * math.sqrt(2) + 1.5


def test_infeasible_world_raises():
    p = WorldParams(extent=(0.0, 0.0, 4.0, 4.0), n_landmarks=50, min_separation=3.0, max_tries=50)
    with pytest.raises(ParameterError, match="could not place"):
        generate_world(0, p)


def test_distance_to_polyline():
    poly = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]])
    got = distance_to_polyline(np.array([[5.0, 3.0], [12.0, 5.0], [-3.0, -4.0]]), poly)
    np.testing.assert_allclose(got, [3.0, 2.0, 5.0])


def test_landmark_surface_counts():
    rng = np.random.default_rng(0)
    cyl = Landmark(0, 0, 1.0, 0.0, 2.0, density=10.0)
    pts = cyl.sample_surface(rng)
    assert len(pts) == round(10 * 2 * math.pi * 2)
    np.testing.assert_allclose(np.hypot(pts[:, 0], pts[:, 1]), 1.0)
    box = Landmark(5, 5, 0.5, 0.0, 1.0, kind=BOX, yaw=30, density=10.0)
    assert len(box.sample_surface(rng)) == 40


def test_landmark_validation():
    with pytest.raises(ParameterError):
        Landmark(0, 0, 0.0, 0, 1)
    with pytest.raises(ParameterError):
        Landmark(0, 0, 1.0, 2, 1)
    with pytest.raises(ParameterError):
        WorldModel.from_landmarks([Landmark(50, 0, 1.0, 0, 1)], (0, 0, 10, 10))


# -- rendering --------------------------------------------------------------------

def test_render_is_repeatable():
    w = generate_world(2, SMALL)
    s = SensorModel(dropout=0.2, noise_sigma=0.05)
    a = render_scan(w, Pose2D(30, 30, 15), s, seed=9)
    b = render_scan(w, Pose2D(30, 30, 15), s, seed=9)
    np.testing.assert_array_equal(a.xyz, b.xyz)
    assert a.frame == "sensor"


def test_render_respects_range():
    w = generate_world(2, SMALL)
    pc = render_scan(w, Pose2D(30, 30, 0), SensorModel(max_range=10.0))
    assert np.hypot(pc.xyz[:, 0], pc.xyz[:, 1]).max() <= 10.0 + 1e-9


@settings(max_examples=15, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-180, 180), st.floats(-180, 180))
def test_render_frame_algebra(tx, ty, yaw, dyaw):
    # a sensor at P o T sees P's scan re-expressed through T^-1 (no points cut by range)
    w = generate_world(3, SMALL)
    P, T = Pose2D(30, 30, yaw), Pose2D(tx, ty, dyaw)
    far = SensorModel(max_range=1000.0)
    a = render_scan(w, P, far)
    b = render_scan(w, P.compose(T), far)
    expect = transform_cloud(a, T.inverse()).xyz
    np.testing.assert_allclose(sorted_rows(np.round(b.xyz, 6)), sorted_rows(np.round(expect, 6)), atol=1e-5)


def test_dropout_keeps_expected_fraction():
    w = generate_world(2, SMALL)
    full = len(render_scan(w, Pose2D(30, 30), SensorModel()))
    kept = len(render_scan(w, Pose2D(30, 30), SensorModel(dropout=0.3), seed=1))
    assert abs(kept / full - 0.7) < 4 * math.sqrt(0.21 / full)


def test_points_budget():
    w = generate_world(2, SMALL)
    assert len(render_scan(w, Pose2D(30, 30), SensorModel(points_budget=500))) == 500


def test_noise_has_requested_spread():
    w = generate_world(2, SMALL)
    clean = render_scan(w, Pose2D(30, 30), SensorModel())
    noisy = render_scan(w, Pose2D(30, 30), SensorModel(noise_sigma=0.05), seed=3)
    resid = noisy.xyz - clean.xyz
    assert resid.std() == pytest.approx(0.05, rel=0.05)


def test_sensor_validation():
    for kw in ({"max_range": 0}, {"dropout": 1.0}, {"noise_sigma": -1}, {"points_budget": -1}):
        with pytest.raises(ParameterError):
            SensorModel(**kw)


# -- layout and benchmark -------------------------------------------------------------

def test_serpentine_spacing_is_exact():
    layout = Layout()
    refs = poses_along(serpentine_path(layout), layout.n_ref_scans, layout.ref_scan_spacing)
    steps = [math.hypot(b.x - a.x, b.y - a.y) for a, b in zip(refs, refs[1:])]
    # straight segments keep 1 m; a corner shortens the chord below 1 m
    straight = [s for s in steps if s > 0.9]
    assert max(abs(s - 1.0) for s in straight) < 1e-9
    assert len(refs) == 200


def test_plan_queries():
    layout = Layout()
    bench = plan_benchmark(0, layout)
    assert len(bench.query_poses) == 50
    bound = math.hypot(layout.max_offset, layout.ref_scan_spacing / 2)
    for (qid, rid, d), q in zip(bench.associations, bench.query_poses):
        ref = bench.ref_poses[rid]
        assert d == pytest.approx(math.hypot(q.x - ref.x, q.y - ref.y))
        assert d <= bound
        # yaw offset from the path heading is a whole number of steps
        offsets = [(q.yaw - r.yaw) % 10.0 for r in bench.ref_poses]
        assert min(min(o, 10.0 - o) for o in offsets) < 1e-6


def test_generate_benchmark_layout(tmp_path):
    bench = generate_benchmark(1, tmp_path, TINY_LAYOUT, world_params=WorldParams(landmark_density=0.02))
    assert sorted(p.name for p in (tmp_path / "ref").iterdir()) == [f"{i:06d}.bin" for i in range(6)]
    assert len(list((tmp_path / "query").iterdir())) == 3
    assert (tmp_path / "ref_poses.csv").read_text().startswith("id,x,y,yaw\n")
    assert (tmp_path / "associations.csv").read_text().splitlines()[0] == "query_id,ref_id,distance"
    scan = load_pointcloud(tmp_path / "ref" / "000002.bin")
    assert len(scan) > 0
    assert len(bench.ref_poses) == 6


def test_generate_benchmark_is_byte_identical(tmp_path):
    wp = WorldParams(landmark_density=0.02)
    generate_benchmark(7, tmp_path / "a", TINY_LAYOUT, SensorModel(dropout=0.1, noise_sigma=0.02), wp)
    generate_benchmark(7, tmp_path / "b", TINY_LAYOUT, SensorModel(dropout=0.1, noise_sigma=0.02), wp)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_generate_benchmark_ascii(tmp_path):
    generate_benchmark(1, tmp_path, TINY_LAYOUT, world_params=WorldParams(landmark_density=0.02),
                       scan_format="txt")
    assert (tmp_path / "query" / "000000.txt").is_file()
    with pytest.raises(ParameterError):
        generate_benchmark(1, tmp_path / "x", TINY_LAYOUT, scan_format="pcd")


def test_empty_world_warns(tmp_path):
    with pytest.warns(EmptyWorldWarning):
        generate_benchmark(0, tmp_path, TINY_LAYOUT, world_params=WorldParams(n_landmarks=0))
    assert load_pointcloud(tmp_path / "ref" / "000000.bin").xyz.shape == (0, 3)


def test_layout_validation():
    with pytest.raises(ParameterError):
        Layout(n_ref_scans=0)
    with pytest.raises(ParameterError):
        Layout(yaw_step=0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        Layout(n_queries=0)

"""Built-in consistency checks run by ``mflpr selfcheck``."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import Config
from .correlation import FFTCorrelator, correlate_direct, correlate_fft
from .descriptor import BevDescriptor, rotate_descriptor
from .geometry import Pose2D
from .metrics import rre, rte


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str


def check_fft_vs_direct(correlate: Callable = correlate_fft, pairs: int = 40, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        hq, wq, hr, wr = rng.choice([8, 16, 31, 32], 4)
        q, r = rng.normal(size=(hq, wq)), rng.normal(size=(hr, wr))
        ref = correlate_direct(q, r).values
        got = correlate(q, r).values
        if got.shape != ref.shape:
            return CheckResult("fft_vs_direct", False, f"shape {got.shape} != {ref.shape}")
        worst = max(worst, float(np.abs(got - ref).max() / (1.0 + np.abs(ref).max())))
    return CheckResult("fft_vs_direct", worst <= 1e-6, f"max relative error {worst:.2e} over {pairs} pairs")


def check_correlator(seed: int = 1) -> CheckResult:
    """Cached-spectrum correlator, including the 180 degree reuse, against the direct sum."""
    rng = np.random.default_rng(seed)
    r, q = rng.normal(size=(45, 38)), rng.normal(size=(12, 12))
    corr = FFTCorrelator(r, q.shape)
    spec = corr.spectrum(q)
    plain = corr.buffer(spec)[:45, :38]
    flipped = corr.buffer(spec, flipped=True)[:45, :38]
    e1 = np.abs(plain - correlate_direct(q, r).values).max()
    e2 = np.abs(flipped - correlate_direct(q[::-1, ::-1], r).values).max()
    err = float(max(e1, e2))
    return CheckResult("correlator_cache", err <= 1e-9, f"max abs error {err:.2e}")


def check_rotation_pairs(seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    d = BevDescriptor((rng.random((30, 30)) < 0.3).astype(float), 0.3)
    bad = [t for t in range(0, 180, 10)
           if not np.array_equal(rotate_descriptor(d, t + 180).grid, rotate_descriptor(d, t).grid[::-1, ::-1])]
    return CheckResult("rotation_half_turn", not bad, "exact" if not bad else f"mismatch at {bad}")


def check_end_to_end(seed: int = 3) -> CheckResult:
    """Tiny noiseless benchmark: every planted query must be recovered within quantization bounds."""
    from .search import build_reference_index, localize
    from .synth import Layout, SensorModel, WorldParams, plan_benchmark, render_scan, scan_seed

    cfg = Config()
    layout = Layout(n_ref_scans=30, ref_scan_spacing=2.0, lane_length=60.0, n_queries=4, max_offset=2.0)
    bench = plan_benchmark(seed, layout, WorldParams(landmark_density=0.02))
    sensor = SensorModel(max_range=30.0)
    index = build_reference_index(
        ((i, render_scan(bench.world, p, sensor, scan_seed(seed, "ref", i)), p) for i, p in enumerate(bench.ref_poses)),
        cfg)
    bound_t = math.sqrt(2) * cfg.vx
    worst_t = worst_r = 0.0
    for qid, pose in enumerate(bench.query_poses):
        est = localize(index, render_scan(bench.world, pose, sensor, scan_seed(seed, "query", qid)))
        worst_t, worst_r = max(worst_t, rte(est.pose, pose)), max(worst_r, rre(est.pose, pose))
    ok = worst_t <= bound_t and worst_r <= cfg.k / 2
    return CheckResult("end_to_end", ok, f"worst RTE {worst_t:.3f} m (bound {bound_t:.3f}), "
                                         f"worst RRE {worst_r:.2f} deg (bound {cfg.k / 2:.1f})")


def run_selfcheck(correlate: Callable = correlate_fft) -> list[CheckResult]:
    """All checks; ``correlate`` lets tests substitute a faulty FFT path."""
    checks = [
        lambda: check_fft_vs_direct(correlate),
        check_correlator,
        check_rotation_pairs,
        check_end_to_end,
    ]
    out = []
    for check in checks:
        try:
            out.append(check())
        except Exception as exc:  # a crashing check is a failed check
            out.append(CheckResult(getattr(check, "__name__", "check"), False, f"{type(exc).__name__}: {exc}"))
    return out


def faulty_correlate(q, r, theta: float = 0.0):
    """FFT correlation with a deliberate one-cell shift, for exercising the failure path."""
    s = correlate_fft(q, r, theta)
    return type(s)(np.roll(s.values, 1, axis=0), s.theta)

"""Matched-filter correlation of a query descriptor against a reference grid.

Every function here uses the same alignment: the score stored at reference
cell ``(i, j)`` is obtained with the query *centre* ``(Hq // 2, Wq // 2)``
placed on that cell,

    S[i, j] = sum_{a, b} q[a, b] * r[a + i - Hq // 2, b + j - Wq // 2],

with reference cells outside the grid contributing zero (linear, not
circular, correlation). Scores are raw sums of products.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass
from typing import Callable, Mapping, Union

import numpy as np
import pyfftw
from scipy import fft as sfft

from .descriptor import BevDescriptor, rotation_angles, rotation_family
from .errors import ParameterError

GridLike = Union[BevDescriptor, np.ndarray]


def fft_workers() -> int:
    """Worker count for scipy.fft, from ``LPR_THREADS`` (0 or unset = all cores)."""
    raw = os.environ.get("LPR_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ParameterError(f"LPR_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ParameterError(f"LPR_THREADS must be >= 0, got {n}")
    return n or (os.cpu_count() or 1)


@dataclass(frozen=True, eq=False)
class CorrelationSurface:
    values: np.ndarray
    theta: float = 0.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class PeakResult:
    i: int
    j: int
    theta: float
    score: float


def _unpack(q: GridLike, r: GridLike) -> tuple[np.ndarray, np.ndarray]:
    qc = q.cell_size if isinstance(q, BevDescriptor) else None
    rc = r.cell_size if isinstance(r, BevDescriptor) else None
    if qc is not None and rc is not None and not np.isclose(qc, rc, rtol=1e-9, atol=0.0):
        raise ParameterError(f"cell size mismatch: query {qc} m vs reference {rc} m")
    qg = np.asarray(q.grid if isinstance(q, BevDescriptor) else q, dtype=np.float64)
    rg = np.asarray(r.grid if isinstance(r, BevDescriptor) else r, dtype=np.float64)
    if qg.ndim != 2 or rg.ndim != 2:
        raise ParameterError("query and reference must be 2-D grids")
    return qg, rg


def correlate_direct(q: GridLike, r: GridLike, theta: float = 0.0) -> CorrelationSurface:
    """Brute-force correlation: one shifted-slice accumulation per query cell."""
    qg, rg = _unpack(q, r)
    Hq, Wq = qg.shape
    Hr, Wr = rg.shape
    ci, cj = Hq // 2, Wq // 2
    out = np.zeros((Hr, Wr))
    for a in range(Hq):
        for b in range(Wq):
            v = qg[a, b]
            if v == 0.0:
                continue
            di, dj = a - ci, b - cj
            # S[i, j] += v * r[i + di, j + dj] for all in-bounds (i + di, j + dj)
            i0, i1 = max(0, -di), min(Hr, Hr - di)
            j0, j1 = max(0, -dj), min(Wr, Wr - dj)
            if i0 < i1 and j0 < j1:
                out[i0:i1, j0:j1] += v * rg[i0 + di:i1 + di, j0 + dj:j1 + dj]
    return CorrelationSurface(out, theta)


def correlate_fft(q: GridLike, r: GridLike, theta: float = 0.0) -> CorrelationSurface:
    """Same contract as :func:`correlate_direct`, evaluated with real FFTs."""
    qg, rg = _unpack(q, r)
    Hq, Wq = qg.shape
    Hr, Wr = rg.shape
    shape = (sfft.next_fast_len(Hq + Hr - 1, real=True), sfft.next_fast_len(Wq + Wr - 1, real=True))
    workers = fft_workers()
    R = sfft.rfft2(rg, s=shape, workers=workers)
    Q = sfft.rfft2(qg, s=shape, workers=workers)
    full = sfft.irfft2(R * np.conj(Q), s=shape, workers=workers)
    # full[s] holds the sum for offset s = i - ci (negative offsets wrap to the end)
    ci, cj = Hq // 2, Wq // 2
    rows = (np.arange(Hr) - ci) % shape[0]
    cols = (np.arange(Wr) - cj) % shape[1]
    return CorrelationSurface(full[np.ix_(rows, cols)], theta)


def argmax_surface(s: CorrelationSurface | np.ndarray, theta: float | None = None) -> PeakResult:
    """Maximal cell; ties go to the smallest ``i`` and then ``j`` (row-major first)."""
    values = s.values if isinstance(s, CorrelationSurface) else np.asarray(s)
    if values.size == 0:
        raise ParameterError("cannot take the argmax of an empty surface")
    if theta is None:
        theta = s.theta if isinstance(s, CorrelationSurface) else 0.0
    flat = int(np.argmax(values))
    i, j = divmod(flat, values.shape[1])
    return PeakResult(i, j, float(theta), float(values[i, j]))


def better_peak(new: PeakResult, best: PeakResult | None) -> bool:
    """Strictly higher score wins; equal scores go to the smaller angle."""
    if best is None:
        return True
    return new.score > best.score or (new.score == best.score and new.theta < best.theta)


def rotation_sweep(family: Mapping[float, GridLike] | BevDescriptor, r: GridLike, k: float,
                   correlate: Callable[..., CorrelationSurface] = correlate_fft,
                   ) -> tuple[PeakResult, dict[float, CorrelationSurface]]:
    """Correlate every rotated query against ``r`` and keep the global peak.

    ``family`` is either a mapping ``theta -> rotated query`` covering
    ``0, k, ..., 360 - k`` or a single descriptor to be rotated here.
    """
    thetas = rotation_angles(k)
    if isinstance(family, BevDescriptor):
        family = rotation_family(family, k)
    best = None
    surfaces = {}
    for theta in thetas:
        try:
            q = family[theta]
        except KeyError:
            raise ParameterError(f"rotation family has no entry for theta={theta}") from None
        surf = correlate(q, r, theta)
        surfaces[theta] = surf
        peak = argmax_surface(surf)
        if better_peak(peak, best):
            best = peak
    return best, surfaces


class FFTCorrelator:
    """A reference grid with its spectrum cached, for many same-shape queries.

    The reference is placed at offset ``(Hq // 2, Wq // 2)`` inside a
    zero-padded buffer so that rows ``[0, Hr)`` and columns ``[0, Wr)`` of the
    inverse transform are exactly the correlation surface; no wrap-around can
    occur because the buffer is at least ``(Hq + Hr - 1) x (Wq + Wr - 1)``.

    ``dtype=np.float32`` halves the cost of the large mosaic sweep at the price
    of ~1e-7 relative rounding in the scores.

    ``backend="fftw"`` runs the inverse transform through a measured FFTW plan
    writing into a preallocated per-thread buffer (planning costs a few
    seconds once per shape and thread). The array returned by :meth:`buffer`
    is then reused by the next call from the same thread. FFTW may pick a
    different plan in another process, so its results can differ from run to
    run in the last bits; the default ``"scipy"`` backend is bit-reproducible.
    """

    def __init__(self, reference: np.ndarray, query_shape: tuple[int, int], dtype=np.float64, workers=None,
                 backend: str = "scipy"):
        if backend not in ("scipy", "fftw"):
            raise ParameterError(f"unknown FFT backend {backend!r}")
        ref = np.asarray(reference)
        self.ref_shape = ref.shape
        self.query_shape = tuple(query_shape)
        self.dtype = np.dtype(dtype)
        self.cdtype = np.result_type(self.dtype, np.complex64)
        self.workers = workers if workers is not None else fft_workers()
        self.backend = backend
        Hr, Wr = ref.shape
        Hq, Wq = self.query_shape
        self.center = (Hq // 2, Wq // 2)
        self.shape = (sfft.next_fast_len(Hr + Hq - 1, real=True), sfft.next_fast_len(Wr + Wq - 1, real=True))
        P0, P1 = self.shape
        buf = np.zeros(self.shape, dtype=self.dtype)
        ci, cj = self.center
        buf[ci:ci + Hr, cj:cj + Wr] = ref
        self._R = sfft.rfft2(buf, workers=self.workers).astype(self.cdtype, copy=False)
        # column DFT restricted to the Hq non-zero query rows
        u = np.arange(P0)[:, None]
        self._A = np.exp(-2j * np.pi * (u * np.arange(Hq)[None, :] % P0) / P0).astype(self.cdtype)
        self._R_flip = None
        self._flip_lock = threading.Lock()
        self._local = threading.local()
        if backend == "fftw":
            self._plan()

    def _plan(self):
        """This thread's ``(input, output, plan)`` triple, created on first use."""
        plan = getattr(self._local, "plan", None)
        if plan is None:
            P0, P1 = self.shape
            src = pyfftw.empty_aligned((P0, P1 // 2 + 1), dtype=self.cdtype)
            dst = pyfftw.empty_aligned(self.shape, dtype=self.dtype)
            fftw = pyfftw.FFTW(src, dst, axes=(0, 1), direction="FFTW_BACKWARD",
                               flags=("FFTW_MEASURE", "FFTW_DESTROY_INPUT"), threads=self.workers)
            plan = self._local.plan = (src, dst, fftw)
        return plan

    def spectrum(self, q: np.ndarray) -> np.ndarray:
        """Half spectrum of the zero-padded query."""
        q = np.asarray(q, dtype=self.dtype)
        if q.shape != self.query_shape:
            raise ParameterError(f"query shape {q.shape} != prepared shape {self.query_shape}")
        X = sfft.rfft(q, n=self.shape[1], axis=1, workers=self.workers)
        return self._A @ X.astype(self.cdtype, copy=False)

    def _flip_reference(self) -> np.ndarray:
        # Rotating the query by 180° turns its spectrum into phase * conj(Q).
        with self._flip_lock:
            if self._R_flip is None:
                P0, P1 = self.shape
                Hq, Wq = self.query_shape
                u = np.arange(P0)[:, None]
                v = np.arange(P1 // 2 + 1)[None, :]
                ang = 2 * np.pi * (((Hq - 1) * u % P0) / P0 + ((Wq - 1) * v % P1) / P1)
                self._R_flip = (self._R * np.exp(1j * ang)).astype(self.cdtype)
        return self._R_flip

    def buffer(self, spec: np.ndarray, flipped: bool = False) -> np.ndarray:
        """Inverse transform; ``buffer[:Hr, :Wr]`` is the surface.

        With ``flipped=True`` the surface is that of the query rotated by 180°
        about its centre (``q[::-1, ::-1]``), obtained from the unrotated
        spectrum without another forward transform.
        """
        if self.backend == "fftw":
            src, dst, fftw = self._plan()
            if flipped:
                np.multiply(self._flip_reference(), spec, out=src)
            else:
                np.conjugate(spec, out=src)
                src *= self._R
            fftw()
            return dst
        if flipped:
            F = self._flip_reference() * spec
        else:
            F = np.conj(spec)
            F *= self._R
        return sfft.irfft2(F, s=self.shape, workers=self.workers, overwrite_x=True)

    def surface(self, q: np.ndarray) -> np.ndarray:
        Hr, Wr = self.ref_shape
        return np.array(self.buffer(self.spectrum(q))[:Hr, :Wr], dtype=np.float64)

"""Reference decomposers: a linear-time velocity peak detector and a
sliding-window Scattershot optimizer (bounded L-BFGS with random restarts)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.optimize import minimize

from .primitive import (
    DURATION_MAX,
    DURATION_MIN,
    Submovement,
    clamp_duration,
    onset_partial,
    primitive_matrix,
    profile_partials,
)
from .signal import VelocitySeries
from .syngen import trial_rng

log = logging.getLogger(__name__)


@dataclass
class PeakDetectorParams:
    sigma: float = 2.5
    theta: float = 0.0375
    duration_bounds: tuple[float, float] = (DURATION_MIN, DURATION_MAX)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma: must be positive")
        if not self.theta >= 0:
            raise ValueError("theta: must be non-negative")
        self.duration_bounds = tuple(self.duration_bounds)


@dataclass
class ScattershotParams:
    window: int = 120
    hop: int = 60
    restarts: int = 10
    patience: int = 1
    error_threshold: float = 0.15
    duration_bounds: tuple[float, float] = (DURATION_MIN, DURATION_MAX)
    displacement_bound: float = 3.0
    max_submovements: int = 12
    maxiter: int = 200

    def __post_init__(self):
        if not 1 <= self.hop <= self.window:
            raise ValueError("hop: must lie in [1, window]")
        if self.restarts < 1:
            raise ValueError("restarts: must be at least 1")
        if self.patience < 0:
            raise ValueError("patience: must be non-negative")
        self.duration_bounds = tuple(self.duration_bounds)


def _unique_onsets(subs: list[Submovement]) -> list[Submovement]:
    """Sort by onset and push colliding onsets forward by one sample."""
    out = []
    for s in sorted(subs, key=lambda s: s.onset):
        onset = s.onset if not out or s.onset > out[-1].onset else out[-1].onset + 1
        out.append(Submovement(onset, s.duration, s.displacement))
    return out


def peak_candidates(smooth: np.ndarray, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """Submovement peaks and sorted onset/offset candidates of a smoothed signal."""
    v = np.asarray(smooth, dtype=float)
    N = len(v)
    if N < 3:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    mid, left, right = v[1:-1], v[:-2], v[2:]
    is_max = (mid > left) & (mid > right)
    is_min = (mid < left) & (mid < right)
    peaks = 1 + np.flatnonzero((is_max & (mid > theta)) | (is_min & (mid < -theta)))
    # opposite-sign extrema inside the threshold band
    extrema = 1 + np.flatnonzero((is_max & (mid <= theta) & (mid < 0)) | (is_min & (mid >= -theta) & (mid > 0)))
    crossings = np.flatnonzero((v[:-1] == 0) | (v[:-1] * v[1:] < 0))
    stable = (np.abs(v) <= theta).astype(np.int8)
    edges = np.diff(np.concatenate([[0], stable, [0]]))
    entries = np.flatnonzero(edges == 1)
    exits = np.flatnonzero(edges == -1) - 1
    exits = exits[exits < N - 1]  # a region running to the end has no exit
    cands = np.unique(np.concatenate([extrema, crossings, entries, exits]))
    return peaks, cands


def peak_bounds(series: VelocitySeries, params: PeakDetectorParams | None = None) -> list[tuple[int, int, int]]:
    """``(peak, onset, offset)`` sample indices for every detected peak.

    Onset/offset are the nearest candidates at or before/after the peak,
    clamped to the signal boundary, at least one sample apart.
    """
    params = params or PeakDetectorParams()
    v = np.asarray(series.values, dtype=float)
    N = len(v)
    if N < 3:
        return []
    # truncated at 4 sigma, normalized kernel, reflected boundaries
    smooth = gaussian_filter1d(v, params.sigma, mode="reflect", truncate=4.0)
    peaks, cands = peak_candidates(smooth, params.theta)
    out = []
    for p in peaks:
        i = np.searchsorted(cands, p, side="right")
        j = np.searchsorted(cands, p, side="left")
        onset = int(cands[i - 1]) if i > 0 else 0
        offset = int(cands[j]) if j < len(cands) else N - 1
        if offset <= onset:
            offset = min(onset + 1, N - 1)
        out.append((int(p), onset, offset))
    return out


def peak_detector_decompose(series: VelocitySeries, params: PeakDetectorParams | None = None) -> list[Submovement]:
    """Every prominent peak of the smoothed velocity is one submovement.

    Displacement is the raw velocity summed over ``[onset, offset]`` times
    the sample period; duration is ``offset - onset`` clamped to bounds.
    """
    params = params or PeakDetectorParams()
    v = np.asarray(series.values, dtype=float)
    csum = np.concatenate([[0.0], np.cumsum(v)])
    subs = []
    for _, onset, offset in peak_bounds(series, params):
        duration = clamp_duration(max(offset - onset, 1) / series.rate, *params.duration_bounds)
        disp = float((csum[offset + 1] - csum[onset]) / series.rate)
        subs.append(Submovement(onset, duration, disp))
    return _unique_onsets(subs)


@dataclass
class WindowFit:
    submovements: list[Submovement]
    mae: float
    history: list[float] = field(default_factory=list)


def _objective(theta, k, residual, rate):
    L = len(residual)
    t0, T, d = theta[:k], theta[k : 2 * k], theta[2 * k :]
    v, unit, dT = profile_partials(t0, T, d, L, rate)
    err = v.sum(axis=0) - residual
    s = np.sign(err) / L
    dt0 = onset_partial(t0, T, d, L, rate)
    grad = np.concatenate([dt0 @ s, dT @ s, unit @ s])
    return float(np.abs(err).mean()), grad


def fit_window(
    segment: VelocitySeries,
    fixed: list[Submovement],
    params: ScattershotParams | None = None,
    rng_seed=0,
    offset: int = 0,
) -> WindowFit:
    """Fit increasing numbers of primitives to one window.

    ``segment`` starts at global sample ``offset``; ``fixed`` primitives (in
    global coordinates) are subtracted first. For each ``k`` the best of
    ``restarts`` bounded L-BFGS runs is kept (the first restart of ``k > 1``
    extends the previous best). Stops when the mean absolute error reaches
    ``error_threshold`` or after ``patience`` increments without
    improvement. Restarts that raise or return a non-finite error are
    discarded. Returned onsets are global.
    """
    params = params or ScattershotParams()
    rng = np.random.default_rng(rng_seed)
    y = np.asarray(segment.values, dtype=float)
    L, rate = len(y), segment.rate
    base = np.zeros(L)
    if fixed:
        o = np.array([s.onset - offset for s in fixed], dtype=float)
        base = primitive_matrix(o, [s.duration for s in fixed], [s.displacement for s in fixed], L, rate).sum(axis=1)
    residual = y - base
    tmin, tmax = params.duration_bounds
    dmax = params.displacement_bound

    best_theta = np.zeros(0)
    best_mae = float(np.abs(residual).mean())
    history = [best_mae]
    if best_mae <= params.error_threshold:
        return WindowFit([], best_mae, history)

    stall = 0
    prev = best_theta
    for k in range(1, params.max_submovements + 1):
        bounds = [(0.0, L - 1.0)] * k + [(tmin, tmax)] * k + [(-dmax, dmax)] * k
        k_best, k_mae = None, np.inf
        for r in range(params.restarts):
            new = np.array([rng.uniform(0, L - 1), rng.uniform(tmin, tmax), rng.uniform(-dmax, dmax)])
            if r == 0 and k > 1:
                j = k - 1
                x0 = np.concatenate([prev[:j], new[:1], prev[j : 2 * j], new[1:2], prev[2 * j :], new[2:]])
            else:
                x0 = np.concatenate([rng.uniform(0, L - 1, k), rng.uniform(tmin, tmax, k), rng.uniform(-dmax, dmax, k)])
                x0[:1], x0[k : k + 1], x0[2 * k : 2 * k + 1] = new[0], new[1], new[2]
            try:
                res = minimize(_objective, x0, args=(k, residual, rate), jac=True, method="L-BFGS-B",
                               bounds=bounds, options={"maxiter": params.maxiter})
            except (ValueError, FloatingPointError) as exc:
                log.debug("restart %d of k=%d discarded: %s", r, k, exc)
                continue
            if not np.isfinite(res.fun):
                continue
            if res.fun < k_mae:
                k_best, k_mae = res.x, float(res.fun)
        if k_best is None:
            break
        prev = k_best
        if k_mae < best_mae - 1e-9:
            best_theta, best_mae = k_best, k_mae
            stall = 0
        else:
            stall += 1
        history.append(best_mae)
        if best_mae <= params.error_threshold or stall >= max(params.patience, 1):
            break

    k = len(best_theta) // 3
    subs = [
        Submovement(
            int(np.clip(round(best_theta[i]), 0, L - 1)) + offset,
            clamp_duration(best_theta[k + i], tmin, tmax),
            float(best_theta[2 * k + i]),
        )
        for i in range(k)
    ]
    return WindowFit(_unique_onsets(subs), best_mae, history)


def scattershot_decompose(series: VelocitySeries, params: ScattershotParams | None = None, rng_seed=0) -> list[Submovement]:
    """Sliding-window Scattershot. Only primitives starting in the first
    ``hop`` samples of a window are kept (all of them in the last window);
    kept primitives are fixed context for later windows."""
    params = params or ScattershotParams()
    v = np.asarray(series.values, dtype=float)
    N = len(v)
    if N < 1:
        return []
    kept: list[Submovement] = []
    start, w = 0, 0
    while True:
        end = min(start + params.window, N)
        last = end >= N
        segment = VelocitySeries(v[start:end], series.rate)
        fit = fit_window(segment, kept, params, trial_rng(int(rng_seed), w), offset=start)
        limit = end if last else start + params.hop
        kept.extend(s for s in fit.submovements if s.onset < limit)
        if last:
            break
        start += params.hop
        w += 1
    return _unique_onsets(kept)

"""Position/velocity preprocessing: finite differences, signed tangential
velocity, resampling, RMS scaling and calibrated additive noise."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

CANONICAL_RATE = 60.0
_ZERO_NORM = 1e-12


class InvalidInputError(ValueError):
    pass


class DegenerateSignalError(ValueError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PositionSeries:
    """Sampled n-dimensional positions with their timestamps (seconds)."""

    samples: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        ts = np.asarray(self.timestamps, dtype=float)
        if samples.ndim != 2 or not 1 <= samples.shape[1] <= 3:
            raise InvalidInputError("positions must have 1 to 3 dimensions")
        if len(samples) != len(ts):
            raise InvalidInputError("samples and timestamps differ in length")
        if len(ts) < 2:
            raise InvalidInputError("need at least 2 samples")
        if np.any(np.diff(ts) <= 0):
            raise InvalidInputError("timestamps must be strictly increasing")
        object.__setattr__(self, "samples", _frozen(samples))
        object.__setattr__(self, "timestamps", _frozen(ts))

    @property
    def dims(self) -> int:
        return self.samples.shape[1]

    def __len__(self):
        return len(self.timestamps)


@dataclass(frozen=True)
class VelocitySeries:
    """Uniformly sampled scalar velocity.

    ``rms_scale`` is the divisor applied by :func:`rms_normalize`, so that
    ``values * rms_scale`` recovers the pre-normalization signal.
    """

    values: np.ndarray
    rate: float = CANONICAL_RATE
    rms_scale: float = 1.0
    is_signed: bool = True

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("velocity values must be finite")
        if not self.rate > 0:
            raise InvalidInputError("rate must be positive")
        if not self.rms_scale > 0:
            raise InvalidInputError("rms_scale must be positive")
        object.__setattr__(self, "values", _frozen(values))

    def __len__(self):
        return len(self.values)

    @property
    def duration(self) -> float:
        return len(self.values) / self.rate

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.values)) / self.rate


@dataclass(frozen=True)
class ReversalTrace:
    """Per-sample direction-change angle and cumulative reversal count.

    ``degenerate`` marks samples where a smoothed velocity was (near) zero
    and the angle was forced to 0.
    """

    angles: np.ndarray
    parity: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "angles", _frozen(self.angles))
        parity = np.asarray(self.parity, dtype=np.int64)
        parity.setflags(write=False)
        object.__setattr__(self, "parity", parity)
        deg = self.degenerate
        deg = np.zeros(len(parity), bool) if deg is None else np.asarray(deg, bool)
        deg.setflags(write=False)
        object.__setattr__(self, "degenerate", deg)

    @property
    def reversal_indices(self) -> np.ndarray:
        return np.flatnonzero(np.diff(self.parity, prepend=0) > 0)


def finite_difference_velocity(positions: PositionSeries) -> np.ndarray:
    """Backward differences ``(r_i - r_{i-1}) / (t_i - t_{i-1})``.

    Returns an array of shape ``(N - 1, dims)``.
    """
    dt = np.diff(positions.timestamps)
    if np.any(dt <= 0):
        raise InvalidInputError("timestamps must be strictly increasing")
    return np.diff(positions.samples, axis=0) / dt[:, None]


def tangential_speed(velocities) -> np.ndarray:
    v = np.asarray(velocities, dtype=float)
    if v.ndim == 1:
        return np.abs(v)
    return np.linalg.norm(v, axis=-1)


def smoothing_window(rate: float) -> int:
    return max(3, math.ceil(rate / 60.0 - 1e-9))


def _window_means(v: np.ndarray, n: int) -> np.ndarray:
    # row i holds mean(v[i:i+n]); defined for i in [0, N - n]
    c = np.concatenate([np.zeros((1, v.shape[1])), np.cumsum(v, axis=0)])
    return (c[n:] - c[:-n]) / n


def reversal_angles(velocities, rate: float) -> tuple[np.ndarray, np.ndarray]:
    """Angle between the mean velocity over ``[i-n, i)`` and over ``[i, i+n)``.

    Returns ``(angles, degenerate)``; samples without two full windows get
    angle 0.
    """
    v = np.asarray(velocities, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    N = len(v)
    n = smoothing_window(rate)
    angles = np.zeros(N)
    degenerate = np.zeros(N, bool)
    if N < 2 * n:
        return angles, degenerate
    means = _window_means(v, n)
    idx = np.arange(n, N - n + 1)
    before, after = means[idx - n], means[idx]
    nb = np.linalg.norm(before, axis=1)
    na = np.linalg.norm(after, axis=1)
    ok = (nb >= _ZERO_NORM) & (na >= _ZERO_NORM)
    cos = np.ones(len(idx))
    cos[ok] = np.einsum("ij,ij->i", before[ok], after[ok]) / (nb[ok] * na[ok])
    angles[idx] = np.arccos(np.clip(cos, -1.0, 1.0))
    degenerate[idx[~ok]] = True
    return angles, degenerate


def strict_local_maxima(x: np.ndarray) -> np.ndarray:
    """Boolean mask of ``x[t] > x[t-1]`` and ``x[t] >= x[t+1]``.

    Out-of-range neighbours count as ``-inf``; a plateau is reported at its
    first index only.
    """
    x = np.asarray(x, dtype=float)
    padded = np.concatenate([[-np.inf], x, [-np.inf]])
    return (padded[1:-1] > padded[:-2]) & (padded[1:-1] >= padded[2:])


def signed_tangential_velocity(velocities, rate: float) -> tuple[VelocitySeries, ReversalTrace]:
    """Tangential speed whose sign flips at every acute (>90 deg) reversal.

    One-dimensional input keeps its own sign; the trace then counts sign
    changes (with angle pi at each).
    """
    v = np.asarray(velocities, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    if v.ndim != 2 or v.shape[1] < 1:
        raise InvalidInputError("velocities must be (N, dims)")

    if v.shape[1] == 1:
        s = np.sign(v[:, 0])
        nz = np.flatnonzero(s)
        flips = np.zeros(len(v), bool)
        if len(nz) > 1:
            changed = s[nz[1:]] != s[nz[:-1]]
            flips[nz[1:][changed]] = True
        angles = np.where(flips, np.pi, 0.0)
        trace = ReversalTrace(angles, np.cumsum(flips))
        return VelocitySeries(v[:, 0], rate, is_signed=True), trace

    angles, degenerate = reversal_angles(v, rate)
    flips = (angles > np.pi / 2) & strict_local_maxima(angles)
    parity = np.cumsum(flips)
    speed = tangential_speed(v)
    values = np.where(parity % 2 == 1, -speed, speed)
    return VelocitySeries(values, rate, is_signed=True), ReversalTrace(angles, parity, degenerate)


def _uniform_grid(t0: float, t1: float, rate: float) -> np.ndarray:
    n = int(math.floor((t1 - t0) * rate + 1e-9)) + 1
    return t0 + np.arange(n) / rate


def resample_linear(series, target_rate: float = CANONICAL_RATE):
    """Linearly interpolate onto a uniform ``target_rate`` grid.

    Accepts :class:`VelocitySeries` or :class:`PositionSeries`. NaN samples
    in positions are treated as missing and recovered by interpolation.
    Values outside the input span are clamped to the endpoints.
    """
    if not target_rate > 0:
        raise InvalidInputError("target_rate must be positive")
    if isinstance(series, VelocitySeries):
        if len(series) < 2:
            raise InvalidInputError("need at least 2 samples to resample")
        if series.rate == target_rate:
            return series
        t = series.times
        grid = _uniform_grid(t[0], t[-1], target_rate)
        return replace(series, values=np.interp(grid, t, series.values), rate=float(target_rate))
    if isinstance(series, PositionSeries):
        t = series.timestamps
        grid = _uniform_grid(t[0], t[-1], target_rate)
        cols = []
        for x in series.samples.T:
            ok = np.isfinite(x)
            if ok.sum() < 2:
                raise InvalidInputError("need at least 2 finite samples per dimension")
            cols.append(np.interp(grid, t[ok], x[ok]))
        return PositionSeries(np.stack(cols, axis=1), grid)
    raise InvalidInputError(f"cannot resample {type(series).__name__}")


def rms(values) -> float:
    v = np.asarray(values, dtype=float)
    return float(np.sqrt(np.mean(v * v))) if v.size else 0.0


def rms_normalize(series: VelocitySeries) -> VelocitySeries:
    r = rms(series.values)
    if not r > 0:
        raise DegenerateSignalError("cannot RMS-normalize an all-zero signal")
    return replace(series, values=series.values / r, rms_scale=series.rms_scale * r)


def add_gaussian_noise(series: VelocitySeries, snr_db: float, rng_seed) -> VelocitySeries:
    """Add white Gaussian noise at the requested SNR (dB).

    ``snr_db = inf`` returns the input unchanged. ``rng_seed`` may be an int,
    a ``SeedSequence`` or a ``Generator``.
    """
    if snr_db is None or math.isinf(snr_db):
        return series
    if not snr_db > 0:
        raise InvalidInputError("snr_db must be in (0, inf]")
    power = float(np.mean(series.values ** 2))
    std = math.sqrt(power / 10 ** (snr_db / 10))
    rng = np.random.default_rng(rng_seed)
    noise = rng.normal(0.0, std, len(series))
    return replace(series, values=series.values + noise)


def lowfreq_explained_variance(series: VelocitySeries, cutoff_hz: float = 10.0) -> float:
    """R^2 of the signal explained by its components below ``cutoff_hz``.

    The low-pass is zero-phase FFT bin masking.
    """
    if cutoff_hz >= series.rate / 2:
        raise InvalidInputError("cutoff must be below the Nyquist frequency")
    x = series.values
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(len(x), d=1.0 / series.rate)
    spec[freqs > cutoff_hz] = 0
    low = np.fft.irfft(spec, n=len(x))
    ss_tot = float(np.sum((x - x.mean()) ** 2))
    if ss_tot == 0:
        return 1.0
    return float(np.clip(1.0 - np.sum((x - low) ** 2) / ss_tot, 0.0, 1.0))


def read_recording_csv(path, column: str | None = None):
    """Load a recording CSV.

    Columns are ``t`` plus either ``x[,y[,z]]`` (positions) or a single
    velocity column (``v`` by default; ``noisy``/``clean`` from trial files
    are accepted too). Returns a :class:`PositionSeries` or a
    ``(timestamps, values)`` tuple for velocity input.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(reader)
    if "t" not in header:
        raise InvalidInputError(f"{path}: missing 't' column")

    def col(name):
        return np.array([float(r[name]) if r[name] not in ("", "nan", "NaN") else np.nan for r in rows])

    t = col("t")
    if column is None:
        for name in ("v", "noisy", "clean"):
            if name in header:
                column = name
                break
    if column is not None:
        if column not in header:
            raise InvalidInputError(f"{path}: missing column {column!r}")
        return t, col(column)
    dims = [c for c in ("x", "y", "z") if c in header]
    if not dims or dims != ["x", "y", "z"][: len(dims)]:
        raise InvalidInputError(f"{path}: expected x[,y[,z]] or v columns")
    return PositionSeries(np.stack([col(c) for c in dims], axis=1), t)


def prepare_recording(path, target_rate: float = CANONICAL_RATE, column: str | None = None) -> VelocitySeries:
    """CSV -> resampled, RMS-normalized signed tangential velocity."""
    loaded = read_recording_csv(path, column)
    if isinstance(loaded, PositionSeries):
        pos = resample_linear(loaded, target_rate)
        vel, _ = signed_tangential_velocity(finite_difference_velocity(pos), target_rate)
    else:
        t, v = loaded
        ok = np.isfinite(v)
        if ok.sum() < 2:
            raise InvalidInputError(f"{path}: fewer than 2 valid velocity samples")
        if np.any(np.diff(t) <= 0):
            raise InvalidInputError(f"{path}: timestamps must be strictly increasing")
        grid = _uniform_grid(t[0], t[-1], target_rate)
        vel = VelocitySeries(np.interp(grid, t[ok], v[ok]), target_rate)
    return rms_normalize(vel)


def write_velocity_csv(path, columns: dict[str, np.ndarray], rate: float) -> None:
    n = len(next(iter(columns.values())))
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *columns])
        for i in range(n):
            w.writerow([repr(i / rate), *(repr(float(c[i])) for c in columns.values())])

"""Minimum-jerk velocity primitives, their superposition and the analytic
gradients of the superposition with respect to duration and displacement."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .signal import CANONICAL_RATE, InvalidInputError, VelocitySeries, strict_local_maxima

DURATION_MIN = 0.085
DURATION_MAX = 1.0
PEAK_FACTOR = 1.875  # peak of the unit profile, in units of d/T


@dataclass(frozen=True)
class Submovement:
    """One primitive: integer onset sample, duration (s), signed displacement."""

    onset: int
    duration: float
    displacement: float

    def __post_init__(self):
        if int(self.onset) != self.onset or self.onset < 0:
            raise InvalidInputError(f"onset must be a non-negative integer, got {self.onset}")
        if not self.duration > 0:
            raise InvalidInputError(f"duration must be positive, got {self.duration}")
        object.__setattr__(self, "onset", int(self.onset))
        object.__setattr__(self, "duration", float(self.duration))
        object.__setattr__(self, "displacement", float(self.displacement))

    def to_dict(self) -> dict:
        return {"onset": self.onset, "duration_s": self.duration, "displacement": self.displacement}

    @classmethod
    def from_dict(cls, d: dict) -> "Submovement":
        onset = d["onset"] if "onset" in d else d["onset_idx"]
        return cls(int(onset), float(d["duration_s"]), float(d["displacement"]))


def clamp_duration(duration: float, lo: float = DURATION_MIN, hi: float = DURATION_MAX) -> float:
    return float(min(max(duration, lo), hi))


def submovements_to_json(subs: Iterable[Submovement], indent=None) -> str:
    return json.dumps([s.to_dict() for s in subs], indent=indent)


def submovements_from_json(text: str) -> list[Submovement]:
    return [Submovement.from_dict(d) for d in json.loads(text)]


def _shape(tau):
    # f(tau) = tau^2 - 2 tau^3 + tau^4 = tau^2 (1 - tau)^2
    return tau * tau * (1.0 - tau) ** 2


def _shape_deriv(tau):
    return 2.0 * tau * (1.0 - tau) * (1.0 - 2.0 * tau)


def minjerk_velocity(displacement, duration, t_rel):
    """Minimum-jerk speed profile ``(30 d / T) f(t/T)``, zero outside ``[0, T]``.

    Broadcasts over all arguments.
    """
    duration = np.asarray(duration, dtype=float)
    if np.any(duration <= 0):
        raise InvalidInputError("duration must be positive")
    tau = np.asarray(t_rel, dtype=float) / duration
    inside = (tau >= 0) & (tau <= 1)
    out = 30.0 * np.asarray(displacement, dtype=float) / duration * _shape(np.where(inside, tau, 0.0))
    return np.where(inside, out, 0.0)


def _params(submovements: Sequence[Submovement]):
    onsets = np.array([s.onset for s in submovements], dtype=float)
    durations = np.array([s.duration for s in submovements], dtype=float)
    disps = np.array([s.displacement for s in submovements], dtype=float)
    return onsets, durations, disps


def primitive_matrix(onsets, durations, displacements, length: int, rate: float = CANONICAL_RATE) -> np.ndarray:
    """Columns are individual primitive profiles over ``length`` samples.

    ``onsets`` may be fractional (used by the optimizer baselines).
    """
    onsets = np.asarray(onsets, dtype=float)
    t = np.arange(length, dtype=float)[:, None]
    if onsets.size == 0:
        return np.zeros((length, 0))
    return minjerk_velocity(displacements, durations, (t - onsets[None, :]) / rate)


def compose(submovements: Sequence[Submovement], length: int, rate: float = CANONICAL_RATE) -> VelocitySeries:
    """Sum of primitive profiles sampled at integer indices; truncated at ``length``."""
    for s in submovements:
        if s.onset >= length:
            raise InvalidInputError(f"onset {s.onset} outside signal of length {length}")
    if not submovements:
        return VelocitySeries(np.zeros(length), rate)
    return VelocitySeries(primitive_matrix(*_params(submovements), length, rate).sum(axis=1), rate)


@dataclass(frozen=True)
class ReconstructionGradients:
    """Per-primitive, per-sample partials of the reconstruction; shape (K, N)."""

    d_by_displacement: np.ndarray
    d_by_duration: np.ndarray


def profile_partials(onsets, durations, displacements, length: int, rate: float = CANONICAL_RATE):
    """Return ``(v, dv/dd, dv/dT)``, each shaped (K, N).

    ``dv/dd`` uses the unit-displacement shape so it stays defined at d = 0.
    """
    onsets = np.asarray(onsets, dtype=float)
    T = np.asarray(durations, dtype=float)[:, None]
    d = np.asarray(displacements, dtype=float)[:, None]
    t = np.arange(length, dtype=float)[None, :]
    tau = (t - onsets[:, None]) / rate / T
    inside = (tau >= 0) & (tau <= 1)
    tau = np.where(inside, tau, 0.0)
    f = _shape(tau)
    unit = np.where(inside, 30.0 / T * f, 0.0)
    v = d * unit
    dT = np.where(inside, -(30.0 * d / T**2) * (f + tau * _shape_deriv(tau)), 0.0)
    return v, unit, dT


def onset_partial(onsets, durations, displacements, length: int, rate: float = CANONICAL_RATE) -> np.ndarray:
    """``dv/d(onset)`` with the onset measured in (fractional) samples; (K, N)."""
    onsets = np.asarray(onsets, dtype=float)
    T = np.asarray(durations, dtype=float)[:, None]
    d = np.asarray(displacements, dtype=float)[:, None]
    tau = (np.arange(length, dtype=float)[None, :] - onsets[:, None]) / rate / T
    inside = (tau >= 0) & (tau <= 1)
    return np.where(inside, -(30.0 * d / T) * _shape_deriv(np.where(inside, tau, 0.0)) / (rate * T), 0.0)


def reconstruct_with_grads(submovements: Sequence[Submovement], length: int, rate: float = CANONICAL_RATE):
    for s in submovements:
        if s.onset >= length:
            raise InvalidInputError(f"onset {s.onset} outside signal of length {length}")
    if not submovements:
        empty = np.zeros((0, length))
        return VelocitySeries(np.zeros(length), rate), ReconstructionGradients(empty, empty)
    v, dd, dT = profile_partials(*_params(submovements), length, rate)
    return VelocitySeries(v.sum(axis=0), rate), ReconstructionGradients(dd, dT)


def peak_pick(probabilities, threshold: float = 0.5) -> np.ndarray:
    """Indices of local maxima of ``probabilities`` that reach ``threshold``.

    A plateau contributes its earliest index; signal edges count as valid
    positions.
    """
    p = np.asarray(probabilities, dtype=float)
    if p.size == 0:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(strict_local_maxima(p) & (p >= threshold))

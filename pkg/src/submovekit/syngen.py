"""Labeled synthetic trials: cold-start priors, the held-out evaluation
protocol and trials driven by fitted parameter distributions."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .primitive import DURATION_MAX, DURATION_MIN, Submovement, compose
from .signal import CANONICAL_RATE, InvalidInputError, VelocitySeries, add_gaussian_noise, rms, write_velocity_csv

if TYPE_CHECKING:
    from .bootstrap import DistributionSet

EVAL_LENGTH = 1000

# Mean pre-normalization RMS of cold-start trials with kappa = 1 is ~1.80
# (2000 trials, seed 0); 1 / 1.80 brings it to ~1.
CALIBRATED_KAPPA = 0.556


@dataclass
class ColdStartConfig:
    duration_range: tuple[float, float] = (DURATION_MIN, DURATION_MAX)
    interval_fraction_range: tuple[float, float] = (0.0, 1.5)
    min_onset_gap: int = 2
    trial_length_range: tuple[int, int] = (100, 500)
    kappa: float = CALIBRATED_KAPPA
    snr_range_db: tuple[float, float] = (10.0, 50.0)
    noise_free_fraction: float = 0.2
    rate: float = CANONICAL_RATE

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("duration_range", "interval_fraction_range", "trial_length_range", "snr_range_db"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise InvalidInputError(f"{name}: empty range [{lo}, {hi}]")
            setattr(self, name, (type(lo)(lo), type(hi)(hi)))
        if self.duration_range[0] <= 0:
            raise InvalidInputError("duration_range: durations must be positive")
        if self.interval_fraction_range[0] < 0:
            raise InvalidInputError("interval_fraction_range: must be non-negative")
        if self.min_onset_gap < 2:
            raise InvalidInputError("min_onset_gap: must be at least 2 samples")
        if self.trial_length_range[0] < 1:
            raise InvalidInputError("trial_length_range: lengths must be positive")
        if not 0 <= self.noise_free_fraction <= 1:
            raise InvalidInputError("noise_free_fraction: must lie in [0, 1]")
        if self.snr_range_db[0] <= 0:
            raise InvalidInputError("snr_range_db: must be positive")


@dataclass(frozen=True)
class LabelTracks:
    """Dense 3 x N ground truth: onset indicator, duration (s), displacement."""

    onset: np.ndarray
    duration: np.ndarray
    displacement: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.stack([self.onset.astype(float), self.duration, self.displacement])

    def __len__(self):
        return len(self.onset)


@dataclass(frozen=True)
class SyntheticTrial:
    clean: VelocitySeries
    noisy: VelocitySeries
    labels: LabelTracks
    submovements: list[Submovement]
    snr_db: float
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.clean)


def trial_rng(master_seed: int, *keys: int) -> np.random.Generator:
    """Independent PCG64 stream for ``(master_seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in keys)))


def _rng(rng_seed) -> np.random.Generator:
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def make_label_tracks(submovements: Sequence[Submovement], length: int) -> LabelTracks:
    onset = np.zeros(length, dtype=np.int8)
    duration = np.zeros(length)
    disp = np.zeros(length)
    for s in submovements:
        if not 0 <= s.onset < length:
            raise InvalidInputError(f"onset {s.onset} outside [0, {length})")
        if onset[s.onset]:
            raise InvalidInputError(f"duplicate onset index {s.onset}")
        onset[s.onset] = 1
        duration[s.onset] = s.duration
        disp[s.onset] = s.displacement
    return LabelTracks(onset, duration, disp)


def extract_submovements(labels: LabelTracks) -> list[Submovement]:
    return [
        Submovement(int(i), float(labels.duration[i]), float(labels.displacement[i]))
        for i in np.flatnonzero(labels.onset)
    ]


def rayleigh_weight(rng: np.random.Generator, size=None):
    """Draws with density proportional to ``|x| exp(-x^2 / 2)``."""
    mag = rng.rayleigh(1.0, size)
    sign = np.where(rng.random(size) < 0.5, -1.0, 1.0)
    return mag * sign


def _finish(subs, length, rate, snr_db, rng, metadata) -> SyntheticTrial:
    raw = compose(subs, length, rate).values
    scale = rms(raw)
    if scale > 0:
        subs = [Submovement(s.onset, s.duration, s.displacement / scale) for s in subs]
    clean = compose(subs, length, rate)
    noisy = add_gaussian_noise(clean, snr_db, rng)
    meta = {"rate": rate, "length": length, "rms_scale": scale or 1.0, **metadata}
    return SyntheticTrial(clean, noisy, make_label_tracks(subs, length), subs, snr_db, meta)


def _schedule_snr(config: ColdStartConfig, rng) -> float:
    if rng.random() < config.noise_free_fraction:
        return math.inf
    return float(rng.uniform(*config.snr_range_db))


def sample_coldstart_trial(config: ColdStartConfig, rng_seed, length: int | None = None) -> SyntheticTrial:
    """One cold-start trial.

    Durations are uniform; ``d = kappa * T * w`` with ``w`` sign-symmetric
    Rayleigh; onset-to-onset gaps are a uniform fraction of the previous
    duration (at least ``min_onset_gap`` samples). The clean signal is
    scaled to unit RMS together with the displacements.
    """
    rng = _rng(rng_seed)
    rate = config.rate
    if length is None:
        length = int(rng.integers(config.trial_length_range[0], config.trial_length_range[1] + 1))
    subs = []
    T = rng.uniform(*config.duration_range)
    onset = int(round(rng.uniform(*config.interval_fraction_range) * T * rate))
    while onset < length:
        d = config.kappa * T * rayleigh_weight(rng)
        subs.append(Submovement(onset, T, d))
        gap = int(round(rng.uniform(*config.interval_fraction_range) * T * rate))
        onset += max(config.min_onset_gap, gap)
        T = rng.uniform(*config.duration_range)
    snr = _schedule_snr(config, rng)
    seed_tag = rng_seed if isinstance(rng_seed, int) else None
    return _finish(subs, length, rate, snr, rng, {"kind": "coldstart", "seed": seed_tag})


def sample_eval_trial(
    overlap_range: tuple[float, float],
    snr_db: float,
    rng_seed,
    length: int = EVAL_LENGTH,
    rate: float = CANONICAL_RATE,
    min_onset_gap: int = 2,
) -> SyntheticTrial:
    """Held-out benchmark trial: ``d = T * U[-1, 1]``, gap fraction ``U[lo, hi]``."""
    lo, hi = overlap_range
    if not (0 <= lo < hi):
        raise InvalidInputError(f"overlap_range: need 0 <= lo < hi, got [{lo}, {hi}]")
    rng = _rng(rng_seed)
    subs, fractions = [], []
    T = rng.uniform(DURATION_MIN, DURATION_MAX)
    onset = int(round(rng.uniform(lo, hi) * T * rate))
    while onset < length:
        subs.append(Submovement(onset, T, T * rng.uniform(-1.0, 1.0)))
        fractions.append(float(rng.uniform(lo, hi)))
        onset += max(min_onset_gap, int(round(fractions[-1] * T * rate)))
        T = rng.uniform(DURATION_MIN, DURATION_MAX)
    seed_tag = rng_seed if isinstance(rng_seed, int) else None
    meta = {"kind": "eval", "overlap_range": [lo, hi], "seed": seed_tag, "interval_fractions": fractions[:-1]}
    return _finish(subs, length, rate, snr_db, rng, meta)


def sample_distribution_trial(
    dists: "DistributionSet", config: ColdStartConfig, rng_seed, length: int | None = None
) -> SyntheticTrial:
    """Trial whose parameters follow a fitted :class:`DistributionSet` chain."""
    if dists is None or not dists.fitted:
        raise RuntimeError("distribution set is not fitted")
    rng = _rng(rng_seed)
    rate = config.rate
    if length is None:
        length = int(rng.integers(config.trial_length_range[0], config.trial_length_range[1] + 1))
    tmin, tmax = config.duration_range
    subs = []
    d = dists.sample_displacement(rng)
    # first onset: one interval into the trial, as for the cold-start chain
    onset = int(round(rng.uniform(0.0, 1.0) * dists.sample_interval(d, rng) * rate))
    while onset < length:
        T = float(np.clip(dists.sample_duration(d, rng), tmin, tmax))
        subs.append(Submovement(onset, T, d))
        interval = dists.sample_interval(d, rng)
        onset += max(config.min_onset_gap, int(round(interval * rate)))
        d = dists.sample_next_displacement(d, rng)
    snr = _schedule_snr(config, rng)
    seed_tag = rng_seed if isinstance(rng_seed, int) else None
    return _finish(subs, length, rate, snr, rng, {"kind": "distribution", "seed": seed_tag})


class ColdStartSource:
    """Batches of equal-length cold-start trials (one length per batch)."""

    def __init__(self, config: ColdStartConfig | None = None):
        self.config = config or ColdStartConfig()

    def batch(self, size: int, rng: np.random.Generator) -> list[SyntheticTrial]:
        lo, hi = self.config.trial_length_range
        length = int(rng.integers(lo, hi + 1))
        return [sample_coldstart_trial(self.config, rng, length) for _ in range(size)]


class MixedSource:
    """Half cold-start, half distribution-driven trials per batch."""

    def __init__(self, dists: "DistributionSet", config: ColdStartConfig | None = None, fraction: float = 0.5):
        self.dists = dists
        self.config = config or ColdStartConfig()
        self.fraction = fraction

    def batch(self, size: int, rng: np.random.Generator) -> list[SyntheticTrial]:
        lo, hi = self.config.trial_length_range
        length = int(rng.integers(lo, hi + 1))
        n_dist = int(round(size * self.fraction))
        trials = [sample_distribution_trial(self.dists, self.config, rng, length) for _ in range(n_dist)]
        trials += [sample_coldstart_trial(self.config, rng, length) for _ in range(size - n_dist)]
        return trials


def _jsonable_snr(snr: float):
    return "inf" if math.isinf(snr) else snr


def parse_snr(value) -> float:
    if value is None or (isinstance(value, str) and value.lower() in ("inf", "infinity")):
        return math.inf
    return float(value)


def write_trial(directory, k: int, trial: SyntheticTrial) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {**trial.metadata, "snr_db": _jsonable_snr(trial.snr_db)}
    doc = {"submovements": [s.to_dict() for s in trial.submovements], "metadata": meta}
    jpath = directory / f"trial_{k}.json"
    jpath.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    cpath = directory / f"trial_{k}.csv"
    write_velocity_csv(cpath, {"clean": trial.clean.values, "noisy": trial.noisy.values}, trial.clean.rate)
    return jpath, cpath


def read_trial(directory, k: int) -> SyntheticTrial:
    from .signal import read_recording_csv

    directory = Path(directory)
    doc = json.loads((directory / f"trial_{k}.json").read_text(encoding="utf-8"))
    meta = doc["metadata"]
    subs = [Submovement.from_dict(d) for d in doc["submovements"]]
    _, clean = read_recording_csv(directory / f"trial_{k}.csv", "clean")
    _, noisy = read_recording_csv(directory / f"trial_{k}.csv", "noisy")
    rate = float(meta.get("rate", CANONICAL_RATE))
    return SyntheticTrial(
        VelocitySeries(clean, rate),
        VelocitySeries(noisy, rate),
        make_label_tracks(subs, len(clean)),
        subs,
        parse_snr(meta.get("snr_db")),
        meta,
    )


def config_to_dict(config: ColdStartConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()}

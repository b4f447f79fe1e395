import math

import numpy as np
import pytest
from scipy import stats

from submovekit.primitive import DURATION_MAX, DURATION_MIN, Submovement, compose
from submovekit.signal import InvalidInputError, rms
from submovekit.syngen import (
    ColdStartConfig,
    ColdStartSource,
    extract_submovements,
    make_label_tracks,
    rayleigh_weight,
    read_trial,
    sample_coldstart_trial,
    sample_eval_trial,
    trial_rng,
    write_trial,
)


def _check_trial(trial, length_range):
    subs = trial.submovements
    onsets = np.array([s.onset for s in subs])
    assert np.all(np.diff(onsets) >= 2)
    assert all(DURATION_MIN <= s.duration <= DURATION_MAX for s in subs)
    assert length_range[0] <= len(trial) <= length_range[1]
    np.testing.assert_array_equal(compose(subs, len(trial)).values, trial.clean.values)
    assert extract_submovements(trial.labels) == subs


def test_coldstart_invariants():
    cfg = ColdStartConfig()
    for k in range(200):
        trial = sample_coldstart_trial(cfg, trial_rng(0, k))
        _check_trial(trial, (100, 500))
        assert rms(trial.clean.values) == pytest.approx(1.0, abs=1e-9)


def test_coldstart_no_overlap_at_max_fraction():
    cfg = ColdStartConfig(interval_fraction_range=(1.5, 1.5))
    for k in range(50):
        subs = sample_coldstart_trial(cfg, trial_rng(1, k)).submovements
        for a, b in zip(subs, subs[1:]):
            assert b.onset >= a.onset + a.duration * 60


def test_rayleigh_weight_mean():
    w = rayleigh_weight(np.random.default_rng(2), 100_000)
    assert np.mean(np.abs(w)) == pytest.approx(math.sqrt(math.pi / 2), rel=0.01)
    assert abs(np.mean(np.sign(w))) < 0.02


def test_coldstart_deterministic():
    cfg = ColdStartConfig()
    a = sample_coldstart_trial(cfg, 42)
    b = sample_coldstart_trial(cfg, 42)
    assert a.submovements == b.submovements
    np.testing.assert_array_equal(a.noisy.values, b.noisy.values)
    assert a.metadata["seed"] == 42


def test_config_validation():
    with pytest.raises(InvalidInputError, match="duration_range"):
        ColdStartConfig(duration_range=(1.0, 0.5))
    with pytest.raises(InvalidInputError, match="min_onset_gap"):
        ColdStartConfig(min_onset_gap=1)


def test_eval_trial_no_overlap_noise_free():
    for k in range(20):
        trial = sample_eval_trial((1.0, 1.5), math.inf, trial_rng(3, k))
        _check_trial(trial, (1000, 1000))
        np.testing.assert_array_equal(trial.clean.values, trial.noisy.values)
        subs = trial.submovements
        for a, b in zip(subs, subs[1:]):
            assert b.onset >= round(a.duration * 60)


def test_eval_fraction_histogram_uniform():
    fractions = []
    for k in range(512):
        trial = sample_eval_trial((0.0, 1.5), math.inf, trial_rng(4, k))
        fractions += trial.metadata["interval_fractions"]
        subs = trial.submovements
        assert len(trial.metadata["interval_fractions"]) == len(subs) - 1
        for f, a, b in zip(trial.metadata["interval_fractions"], subs, subs[1:]):
            assert b.onset - a.onset == max(2, round(f * a.duration * 60))
    counts, _ = np.histogram(fractions, bins=15, range=(0.0, 1.5))
    assert stats.chisquare(counts).pvalue > 0.01


def test_eval_submovement_rate_matches_renewal_expectation():
    expected = 1.0 / (1.25 * (DURATION_MIN + DURATION_MAX) / 2)
    rates = [len(sample_eval_trial((1.0, 1.5), math.inf, trial_rng(5, k)).submovements) / (1000 / 60) for k in range(200)]
    assert np.mean(rates) == pytest.approx(expected, rel=0.10)


def test_eval_invalid_range():
    with pytest.raises(InvalidInputError, match="overlap_range"):
        sample_eval_trial((1.0, 0.5), math.inf, 0)


def test_label_tracks():
    tracks = make_label_tracks([], 20)
    assert not tracks.as_array().any()
    tracks = make_label_tracks([Submovement(10, 0.5, -0.2)], 20)
    arr = tracks.as_array()
    assert arr.shape == (3, 20)
    assert np.flatnonzero(arr.any(axis=0)).tolist() == [10]
    np.testing.assert_array_equal(arr[:, 10], [1, 0.5, -0.2])
    with pytest.raises(InvalidInputError, match="duplicate"):
        make_label_tracks([Submovement(3, 0.5, 1), Submovement(3, 0.2, 1)], 20)


def test_label_round_trip_random():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        n = int(rng.integers(0, 10))
        onsets = np.sort(rng.choice(100, n, replace=False))
        subs = [Submovement(int(o), rng.uniform(0.085, 1), rng.normal()) for o in onsets]
        assert extract_submovements(make_label_tracks(subs, 100)) == subs


def test_source_batches_share_length():
    batch = ColdStartSource().batch(6, np.random.default_rng(0))
    assert len({len(t) for t in batch}) == 1


def test_trial_io_round_trip(tmp_path):
    trial = sample_eval_trial((0.0, 1.5), 20.0, 9)
    write_trial(tmp_path, 0, trial)
    back = read_trial(tmp_path, 0)
    assert back.submovements == trial.submovements
    np.testing.assert_array_equal(back.noisy.values, trial.noisy.values)
    assert back.snr_db == 20.0

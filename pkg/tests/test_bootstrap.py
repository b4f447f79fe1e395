import json

import numpy as np
import pytest
import torch
from scipy.integrate import trapezoid

from submovekit.bootstrap import (
    DistributionSet,
    InsufficientDataError,
    Kde,
    RefinementSchedule,
    RefinementState,
    estimate_distributions,
    kde_fit,
    pseudo_label,
    refine,
)
from submovekit.detector import Tfcn, TfcnConfig
from submovekit.primitive import DURATION_MAX, DURATION_MIN, Submovement
from submovekit.syngen import ColdStartConfig, sample_coldstart_trial, sample_distribution_trial, trial_rng

TINY = TfcnConfig(hidden_channels=[4, 4], hidden_kernel=5, output_kernel=3)


def _coldstart_labels(n_trials=60, seed=0):
    cfg = ColdStartConfig()
    return [sample_coldstart_trial(cfg, trial_rng(seed, k)).submovements for k in range(n_trials)]


def test_kde_requires_50_samples():
    with pytest.raises(InsufficientDataError):
        kde_fit(np.zeros(49))
    kde_fit(np.arange(50.0))


def test_kde_degenerate_samples():
    kde = kde_fit(np.full(100, 2.0))
    draws = kde.sample(np.random.default_rng(0), 1000)
    dev = np.abs(draws - 2.0) / kde.bandwidth[0]
    assert kde.bandwidth[0] > 0
    assert np.mean(dev <= 3) > 0.99 and np.all(dev <= 5)


def test_kde_standard_normal_moments():
    rng = np.random.default_rng(1)
    kde = kde_fit(rng.normal(size=10_000))
    draws = kde.sample(rng, 10_000)[:, 0]
    assert abs(draws.mean()) < 0.05
    assert 0.95 <= draws.std() <= 1.1


def test_kde_density_integrates_to_one():
    rng = np.random.default_rng(2)
    k1 = kde_fit(rng.normal(size=200))
    x = np.linspace(-10, 10, 4001)
    assert trapezoid(k1.density(x), x) == pytest.approx(1.0, abs=1e-3)
    k2 = kde_fit(rng.normal(size=(100, 2)))
    g = np.linspace(-8, 8, 321)
    X, Y = np.meshgrid(g, g, indexing="ij")
    dens = k2.density(np.column_stack([X.ravel(), Y.ravel()])).reshape(X.shape)
    assert trapezoid(trapezoid(dens, g, axis=1), g) == pytest.approx(1.0, abs=1e-3)


def test_silverman_bandwidth():
    data = np.random.default_rng(3).normal(size=(500, 2)) * [1.0, 3.0]
    h = Kde(data).bandwidth
    expected = data.std(axis=0, ddof=1) * (4 / (4 * 500)) ** (1 / 6)
    np.testing.assert_allclose(h, expected)


def test_sign_correlation_oracle():
    # alternating-sign chains: the next displacement opposes the previous one
    rng = np.random.default_rng(4)
    labels = []
    for r in range(20):
        mags = rng.uniform(0.3, 1.5, 10)
        signs = np.where(np.arange(10) % 2 == 0, 1.0, -1.0) * (1 if r % 2 else -1)
        labels.append([Submovement(5 + 20 * i, 0.3, m * s) for i, (m, s) in enumerate(zip(mags, signs))])
    dists = estimate_distributions(labels)
    draws = [dists.sample_next_displacement(0.8, rng) for _ in range(2000)]
    assert np.mean(draws) < 0


def test_sampled_durations_clamped():
    dists = estimate_distributions(_coldstart_labels())
    rng = np.random.default_rng(5)
    for d in rng.normal(0, 2, 2000):
        assert DURATION_MIN <= dists.sample_duration(d, rng) <= DURATION_MAX
        assert 0 <= dists.sample_interval(d, rng) <= 1.5


def test_marginal_moment_fidelity():
    labels = _coldstart_labels(200)
    d = np.array([s.displacement for subs in labels for s in subs])
    dists = estimate_distributions(labels)
    rng = np.random.default_rng(6)
    draws = np.array([dists.sample_displacement(rng) for _ in range(5000)])
    assert abs(draws.mean() - d.mean()) <= 0.1 * d.std()
    assert draws.std() == pytest.approx(d.std(), rel=0.1)


def test_intervals_stay_within_recordings():
    labels = [[Submovement(0, 0.3, 1.0), Submovement(30, 0.3, -1.0)] for _ in range(60)]
    dists = estimate_distributions(labels)
    np.testing.assert_allclose(dists.I_given_d.data[:, 1], 0.5)
    assert dists.fit_metadata["n_submovements"] == 120


def test_insufficient_data_names_distribution():
    labels = [[Submovement(0, 0.3, 1.0)] for _ in range(60)]  # no intervals at all
    with pytest.raises(InsufficientDataError) as exc:
        estimate_distributions(labels)
    assert exc.value.distribution == "I_given_d"


def test_estimate_deterministic_and_json_round_trip():
    labels = _coldstart_labels()
    a, b = estimate_distributions(labels), estimate_distributions(labels)
    assert a.to_json() == b.to_json()
    c = DistributionSet.from_json(a.to_json())
    assert c.fitted
    rng1, rng2 = np.random.default_rng(7), np.random.default_rng(7)
    assert [a.sample_duration(0.5, rng1) for _ in range(20)] == [c.sample_duration(0.5, rng2) for _ in range(20)]
    assert json.loads(a.to_json())["fit_metadata"]["source"] == "pseudo_labels"


def test_distribution_trials_respect_generator_contract():
    dists = estimate_distributions(_coldstart_labels())
    cfg = ColdStartConfig()
    for k in range(30):
        trial = sample_distribution_trial(dists, cfg, trial_rng(8, k))
        onsets = [s.onset for s in trial.submovements]
        assert all(b - a >= cfg.min_onset_gap for a, b in zip(onsets, onsets[1:]))
        assert all(DURATION_MIN <= s.duration <= DURATION_MAX for s in trial.submovements)


def test_pseudo_label_empty_corpus():
    assert pseudo_label(Tfcn(TINY), []) == []


def _silent_model():
    torch.manual_seed(0)
    model = Tfcn(TINY)
    with torch.no_grad():
        model.head.bias[0] = -20.0
    return model.eval()


def _corpus(n, seed):
    cfg = ColdStartConfig(trial_length_range=(120, 120))
    return [sample_coldstart_trial(cfg, trial_rng(seed, k)).noisy for k in range(n)]


def test_refine_zero_iterations_is_identity():
    state = RefinementState.initial(_silent_model(), _corpus(2, 1))
    out = refine(state, _corpus(3, 2), _corpus(2, 1), RefinementSchedule(max_iterations=3), iterations=0)
    assert out.iteration == 0 and out.history == [] and out.best_weights is state.best_weights


def test_refine_falls_back_to_coldstart_when_estimation_fails():
    held = _corpus(2, 1)
    state = RefinementState.initial(_silent_model(), held)
    sched = RefinementSchedule(max_iterations=1, batch_size=4, batches_per_epoch=2)
    cfg = ColdStartConfig(trial_length_range=(60, 80))
    out = refine(state, _corpus(3, 2), held, sched, cfg, rng_seed=0)
    assert out.iteration == 1 and len(out.history) == 1
    assert out.flags[0].startswith("coldstart_only")
    assert out.distributions is None
    assert out.best_r2 >= out.baseline_r2
    assert state.iteration == 0  # input state untouched


def test_refinement_plateau_rule():
    w = RefinementState.initial(_silent_model(), _corpus(1, 1)).weights
    state = RefinementState(weights=w, best_weights=w, baseline_r2=0.9, best_r2=0.9)
    state.best_history = [0.9, 0.9005]
    assert not state.plateaued(3, 1e-3)
    state.best_history.append(0.9008)
    assert state.plateaued(3, 1e-3)
    state.best_history = [0.95, 0.95, 0.95]
    assert not state.plateaued(3, 1e-3)

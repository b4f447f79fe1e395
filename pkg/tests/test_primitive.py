import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from submovekit.primitive import (
    Submovement,
    compose,
    minjerk_velocity,
    peak_pick,
    primitive_matrix,
    profile_partials,
    reconstruct_with_grads,
    submovements_from_json,
    submovements_to_json,
)
from submovekit.signal import InvalidInputError


def test_profile_endpoints_and_midpoint():
    assert minjerk_velocity(1.0, 1.0, 0.0) == 0.0
    assert minjerk_velocity(1.0, 1.0, 1.0) == 0.0
    assert minjerk_velocity(1.0, 1.0, 0.5) == pytest.approx(1.875, abs=1e-15)
    assert minjerk_velocity(1.0, 1.0, -0.1) == 0.0 and minjerk_velocity(1.0, 1.0, 1.1) == 0.0


def test_profile_integral_by_quadrature():
    d, T = 0.3, 0.4
    t = np.linspace(0, T, 100_001)
    v = minjerk_velocity(d, T, t)
    trap = np.sum((v[1:] + v[:-1]) / 2) * (t[1] - t[0])
    assert abs(trap - d) < 1e-8


def test_invalid_duration():
    with pytest.raises(InvalidInputError):
        minjerk_velocity(1.0, 0.0, 0.1)


def test_compose_empty_and_single():
    assert np.all(compose([], 50).values == 0)
    s = Submovement(5, 0.3, 0.5)
    sig = compose([s], 60)
    expected = minjerk_velocity(0.5, 0.3, (np.arange(60) - 5) / 60)
    np.testing.assert_array_equal(sig.values, expected)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.085, 1.0), st.floats(-2, 2).filter(lambda d: abs(d) > 0.01))
def test_displacement_conservation(T, d):
    exact, _ = quad(lambda t: float(minjerk_velocity(d, T, t)), 0, T, epsabs=1e-13, epsrel=1e-12)
    assert abs(exact - d) < 1e-8
    riemann = compose([Submovement(0, T, d)], int(T * 60) + 5).values.sum() / 60
    assert abs(riemann - d) <= 0.02 * abs(d)


def test_superposition_of_identical():
    s = Submovement(10, 0.4, 0.7)
    np.testing.assert_array_equal(compose([s, s], 80).values, 2 * compose([s], 80).values)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 99), st.floats(0.085, 1.0), st.floats(-2, 2)), max_size=6),
    st.lists(st.tuples(st.integers(0, 99), st.floats(0.085, 1.0), st.floats(-2, 2)), max_size=6),
    st.floats(-3, 3),
)
def test_linearity_and_scale(a, b, c):
    A = [Submovement(*x) for x in a]
    B = [Submovement(*x) for x in b]
    np.testing.assert_allclose(compose(A + B, 100).values, compose(A, 100).values + compose(B, 100).values, atol=1e-12)
    scaled = [Submovement(s.onset, s.duration, c * s.displacement) for s in A]
    np.testing.assert_allclose(compose(scaled, 100).values, c * compose(A, 100).values, atol=1e-12)


def test_truncation_at_edge():
    s = Submovement(95, 0.5, 1.0)
    sig = compose([s], 100)
    assert len(sig) == 100 and sig.values[96] > 0


def test_onset_outside_signal():
    with pytest.raises(InvalidInputError):
        compose([Submovement(100, 0.5, 1.0)], 100)


def test_grads_at_zero_displacement():
    s = Submovement(3, 0.5, 0.0)
    recon, grads = reconstruct_with_grads([s], 50)
    assert np.all(recon.values == 0)
    np.testing.assert_allclose(grads.d_by_displacement[0], compose([Submovement(3, 0.5, 1.0)], 50).values)


def _fd_check(onset, T, d, N=80, rate=60.0, h=1e-5):
    _, gd, gT = profile_partials([onset], [T], [d], N, rate)
    f = lambda T_, d_: primitive_matrix([onset], [T_], [d_], N, rate)[:, 0]
    fd_d = (f(T, d + h) - f(T, d - h)) / (2 * h)
    fd_T = (f(T + h, d) - f(T - h, d)) / (2 * h)
    rel_d = np.abs(gd[0] - fd_d).max() / np.abs(fd_d).max()
    rel_T = np.abs(gT[0] - fd_T).max() / np.abs(fd_T).max()
    return rel_d, rel_T


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(100):
        T = rng.uniform(0.085, 1.0)
        d = rng.choice([-1, 1]) * rng.uniform(0.01, 2)
        onset = int(rng.integers(0, 20))
        rel_d, rel_T = _fd_check(onset, T, d)
        assert rel_d < 1e-5 and rel_T < 1e-5


def test_gradient_support():
    s = Submovement(10, 0.25, 0.8)
    _, g = reconstruct_with_grads([s], 60)
    end = 10 + 0.25 * 60
    t = np.arange(60)
    outside = (t < 10) | (t > end)
    assert np.all(g.d_by_displacement[0][outside] == 0)
    assert np.all(g.d_by_duration[0][outside] == 0)


def test_peak_pick_examples():
    assert len(peak_pick(np.full(100, 0.1))) == 0
    p = np.zeros(100)
    p[45:56] = 0.9 - 0.15 * np.abs(np.arange(45, 56) - 50)
    p = np.clip(p, 0, 1)
    assert list(peak_pick(p)) == [50]


def _brute_force_peaks(p, thr=0.5):
    out = []
    for t in range(len(p)):
        left = p[t - 1] if t > 0 else -np.inf
        right = p[t + 1] if t < len(p) - 1 else -np.inf
        if p[t] >= max(left, right) and p[t] >= thr:
            out.append(t)
    return out


def test_peak_pick_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(100):
        p = rng.random(int(rng.integers(1, 200)))
        idx = peak_pick(p)
        assert list(idx) == _brute_force_peaks(p)
        assert np.all(np.diff(idx) > 0)


def test_peak_pick_plateau_earliest():
    assert list(peak_pick(np.array([0.1, 0.7, 0.7, 0.7, 0.2]))) == [1]


def test_json_round_trip():
    subs = [Submovement(3, 0.2, -0.1), Submovement(30, 0.9, 1.5)]
    text = submovements_to_json(subs)
    assert json.loads(text)[0] == {"onset": 3, "duration_s": 0.2, "displacement": -0.1}
    assert submovements_from_json(text) == subs

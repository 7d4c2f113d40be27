import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dcrab_nv.noise import (
    INFINITE,
    TABLE1_TAUS,
    CalibrationError,
    CoherenceTimes,
    OuParams,
    _phi,
    calibrate_from_coherence,
    calibration_table,
    echo_time,
    free_coherence,
    hahn_coherence,
    hahn_exponent,
    ou_autocovariance,
    ou_integrated_step,
    ou_sample_batch,
    ou_sample_trace,
    ou_update,
    predict_from_tau,
    sigma_from_tau,
)
from dcrab_nv.rng import stream


def literal_row(tau, t2_star):
    """High-precision root of the two-exponent system written term by term."""
    mp.mp.dps = 40
    tau, s = mp.mpf(tau), mp.mpf(t2_star)
    eq = lambda h: 4 * tau * mp.e ** (-h / (2 * tau)) - tau * (mp.e ** (-h / tau) + mp.e ** (-s / tau) + 2) + h - s
    h = mp.findroot(eq, (s * (1 + mp.mpf(10) ** -12), 10), solver="anderson")
    sigma = (tau**2 * mp.e ** (-s / tau) - tau**2 + tau * s) ** mp.mpf(-0.5)
    return float(sigma), float(h)


@pytest.mark.parametrize("tau", TABLE1_TAUS)
def test_calibration_rows_match_high_precision_oracle(tau):
    sigma, t2_he = predict_from_tau(tau, 0.1)
    ref_sigma, ref_he = literal_row(tau, 0.1)
    assert sigma == pytest.approx(ref_sigma, rel=1e-10)
    assert t2_he == pytest.approx(ref_he, rel=1e-9)


def test_table_units_and_order():
    rows = calibration_table()
    assert [r.tau_us for r in rows] == list(TABLE1_TAUS)
    for r in rows:
        assert r.sigma_over_2pi_MHz == pytest.approx(r.sigma_rad_per_us / (2 * math.pi))
    # faster noise needs a wider distribution for the same T2*
    sig = [r.sigma_rad_per_us for r in rows]
    assert sig == sorted(sig)


def test_free_decay_reaches_one_over_e_at_t2_star():
    for tau in TABLE1_TAUS:
        p = OuParams(sigma_from_tau(tau, 0.1), tau)
        assert free_coherence(p, 0.1) == pytest.approx(math.exp(-1), rel=1e-12)


@pytest.mark.parametrize("tau", TABLE1_TAUS)
def test_echo_time_self_consistent(tau):
    p = OuParams(sigma_from_tau(tau, 0.1), tau)
    assert abs(hahn_coherence(p, echo_time(p)) - math.exp(-1)) < 1e-10


@pytest.mark.parametrize("x", [1e-9, 1e-5, 9.99e-3, 1e-2, 1.01e-2, 0.5, 3.0, 50.0])
def test_phi_small_argument_accuracy(x):
    mp.mp.dps = 40
    ref = float(mp.mpf(x) - 1 + mp.e ** (-mp.mpf(x)))
    assert _phi(x) == pytest.approx(ref, rel=1e-13)


@given(
    log_tau=st.floats(math.log(0.02), math.log(100.0)),
    t2_star=st.floats(0.05, 1.0),
)
def test_calibration_round_trip(log_tau, t2_star):
    tau = math.exp(log_tau)
    sigma, t2_he = predict_from_tau(tau, t2_star)
    got = calibrate_from_coherence(CoherenceTimes(t2_star, t2_he))
    assert got.tau == pytest.approx(tau, rel=1e-6)
    assert got.sigma == pytest.approx(sigma, rel=1e-6)


def test_calibration_rejects_unsolvable_inputs():
    with pytest.raises(CalibrationError):
        calibrate_from_coherence(CoherenceTimes(0.1, 0.1))
    with pytest.raises(CalibrationError):
        calibrate_from_coherence(CoherenceTimes(0.1, 1e9))
    with pytest.raises(ValueError):
        CoherenceTimes(0.2, 0.1)


def test_params_validation():
    with pytest.raises(ValueError):
        OuParams(-1.0, 1.0)
    with pytest.raises(ValueError):
        OuParams(1.0, 0.0)
    assert OuParams(1.0, INFINITE).is_static
    assert OuParams.from_mhz(1.0, 1.0).sigma == pytest.approx(2 * math.pi)


def test_quasi_static_trace_is_constant():
    tr = ou_sample_trace(OuParams(3.0, INFINITE), np.linspace(0, 1, 20), stream(1, 9))
    assert np.all(tr.values == tr.values[0])
    assert ou_update(np.array([0.7]), 5.0, OuParams(3.0, INFINITE), np.array([2.0]))[0] == 0.7


def test_closed_forms_reject_static_noise_and_negative_time():
    with pytest.raises(ValueError):
        free_coherence(OuParams(1.0, INFINITE), 0.1)
    with pytest.raises(ValueError):
        hahn_coherence(OuParams(1.0, 1.0), -0.1)


def test_sample_moments_and_autocovariance():
    p = OuParams(2.0, 0.5)
    t = np.linspace(0.0, 1.5, 7)
    x = ou_sample_batch(p, t, 40_000, stream(3, 0))
    n = x.shape[0]
    var = p.variance
    # stationary marginals at every grid point
    assert np.all(np.abs(x.mean(axis=0)) < 3 * math.sqrt(var / n))
    assert np.all(np.abs(x.var(axis=0) - var) < 3 * var * math.sqrt(2 / n))
    for k in range(1, t.size):
        cov = np.mean(x[:, 0] * x[:, k])
        rho = ou_autocovariance(p, t[k]) / var
        se = var * math.sqrt((1 + rho**2) / n)
        assert abs(cov - ou_autocovariance(p, t[k])) < 3 * se


def test_exact_update_is_step_size_independent():
    # one big step and many small steps have the same marginal law
    p = OuParams(1.0, 0.2)
    coarse = ou_sample_batch(p, np.array([0.0, 0.6]), 40_000, stream(5, 0))[:, 1]
    fine = ou_sample_batch(p, np.linspace(0.0, 0.6, 61), 40_000, stream(5, 1))[:, -1]
    n = coarse.size
    assert abs(coarse.var() - fine.var()) < 3 * math.sqrt(2) * math.sqrt(2 / n)


def test_integrated_step_moments():
    p = OuParams(1.5, 0.3)
    dt = 0.4
    x0 = p.sigma * stream(7, 0).standard_normal(50_000)
    x1, integral = ou_integrated_step(x0, dt, p, stream(7, 1))
    n = x0.size
    expected = 2 * p.variance * p.tau**2 * _phi(dt / p.tau)
    assert abs(integral.var() - expected) < 3 * expected * math.sqrt(2 / n)
    assert abs(x1.var() - p.variance) < 3 * p.variance * math.sqrt(2 / n)
    # the free-evolution closed form is the characteristic function of this integral
    assert np.mean(np.cos(integral)) == pytest.approx(float(free_coherence(p, dt)), abs=4 / math.sqrt(n))
    same, zero = ou_integrated_step(x0, 0.0, p, stream(7, 2))
    assert np.array_equal(same, x0) and np.all(zero == 0)


def test_hahn_exponent_matches_term_by_term_form():
    p = OuParams(3.0, 0.7)
    for T in (1e-4, 0.05, 0.7, 4.0):
        mp.mp.dps = 40
        s, tau, Tm = mp.mpf(p.sigma), mp.mpf(p.tau), mp.mpf(T)
        ref = s**2 * tau**2 * (Tm / tau + 4 * mp.e ** (-Tm / (2 * tau)) - mp.e ** (-Tm / tau) - 3)
        assert float(hahn_exponent(p, T)) == pytest.approx(float(ref), rel=1e-10)


def test_echo_outlasts_free_decay():
    for r in calibration_table():
        assert r.t2_he_us > r.t2_star_us


def test_zero_innovation_update_is_pure_relaxation():
    p = OuParams(1.0, 0.3)
    x = np.array([2.0])
    for _ in range(5):
        nxt = ou_update(x, 0.1, p, np.zeros(1))
        assert nxt[0] == x[0] * math.exp(-0.1 / 0.3)
        x = nxt


def test_static_amplitude_noise_variance():
    from dcrab_nv.noise import AMPLITUDE_NOISE

    x = ou_sample_batch(AMPLITUDE_NOISE, np.array([0.0, 0.25, 0.5]), 100_000, stream(31))
    n = x.shape[0]
    assert np.all(x == x[:, :1])
    assert abs(x[:, 0].var() - 0.0025) < 3 * 0.0025 * math.sqrt(2 / n)


def test_autocovariance_values():
    p = OuParams(2.0, 0.4)
    assert ou_autocovariance(p, 0.0) == 4.0
    assert ou_autocovariance(p, -0.4) == pytest.approx(4.0 / math.e)
    assert ou_autocovariance(OuParams(2.0, INFINITE), 7.0) == 4.0
    x = ou_sample_batch(p, np.array([0.0, 0.2]), 100_000, stream(32))
    rho = math.exp(-0.5)
    se = 4.0 * math.sqrt((1 + rho**2) / x.shape[0])
    assert abs(np.mean(x[:, 0] * x[:, 1]) - 4.0 * rho) < 3 * se


def test_grid_validation():
    with pytest.raises(ValueError):
        ou_sample_trace(OuParams(1.0, 1.0), [0.0, 0.2, 0.1], stream(0))


def test_short_time_gaussian_limit():
    p = OuParams(5.0, 2.0)
    t = p.tau / 1000
    assert free_coherence(p, t) == pytest.approx(math.exp(-p.variance * t**2 / 2), rel=1e-6)
    assert free_coherence(p, 0.0) == 1.0 and hahn_coherence(p, 0.0) == 1.0


@given(
    sigma=st.floats(0.1, 50.0),
    log_tau=st.floats(math.log(0.005), math.log(200.0)),
    T=st.floats(0.0, 5.0),
)
def test_echo_never_below_free_decay(sigma, log_tau, T):
    p = OuParams(sigma, math.exp(log_tau))
    assert hahn_coherence(p, T) >= free_coherence(p, T) - 1e-15


def test_coherence_curves_are_non_increasing():
    for tau in TABLE1_TAUS:
        p = OuParams(sigma_from_tau(tau, 0.1), tau)
        t = np.linspace(0.0, 3.0, 10_000)
        assert np.all(np.diff(free_coherence(p, t)) <= 0)
        assert np.all(np.diff(hahn_coherence(p, t)) <= 0)


def test_two_half_steps_compose_to_one_step():
    # conditional mean and variance of the chained update
    p = OuParams(1.3, 0.25)
    dt = 0.2
    a_half = math.exp(-dt / 2 / p.tau)
    v_half = p.variance * (1 - math.exp(-dt / p.tau))
    assert a_half**2 == pytest.approx(math.exp(-dt / p.tau))
    assert a_half**2 * v_half + v_half == pytest.approx(p.variance * (1 - math.exp(-2 * dt / p.tau)))


def test_calibration_from_rounded_table_entries():
    slow = calibrate_from_coherence(CoherenceTimes(0.1, 1.8))
    assert slow.tau == pytest.approx(100.0, rel=0.05)
    assert slow.sigma_over_2pi_mhz == pytest.approx(2.251, abs=0.002)
    mid = calibrate_from_coherence(CoherenceTimes(0.1, 0.41))
    assert mid.tau == pytest.approx(1.0, rel=0.05)
    assert mid.sigma_over_2pi_mhz == pytest.approx(2.288, abs=0.002)


def test_long_correlation_limit():
    asymptote = math.sqrt(2) / 0.1 / (2 * math.pi)
    assert asymptote == pytest.approx(2.2508, abs=1e-4)
    assert sigma_from_tau(100.0, 0.1) / (2 * math.pi) == pytest.approx(asymptote, rel=1e-3)

"""Ornstein-Uhlenbeck noise: exact sampling, coherence decay and calibration.

Units are fixed throughout: times in microseconds, detuning noise in
angular frequency (rad/us). Amplitude noise is dimensionless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq

INFINITE = math.inf
TWO_PI = 2.0 * math.pi


class CalibrationError(ValueError):
    """Raised when coherence times admit no OU parameter solution."""


@dataclass(frozen=True)
class OuParams:
    """Stationary OU descriptor.

    ``sigma`` is the stationary standard deviation and ``tau`` the
    correlation time in us. ``tau = INFINITE`` gives a quasi-static process,
    constant per realization.
    """

    sigma: float
    tau: float

    def __post_init__(self):
        if not self.sigma >= 0 or not math.isfinite(self.sigma):
            raise ValueError(f"sigma must be finite and >= 0, got {self.sigma}")
        if not (self.tau > 0):
            raise ValueError(f"tau must be positive or INFINITE, got {self.tau}")

    @property
    def variance(self) -> float:
        return self.sigma**2

    @property
    def is_static(self) -> bool:
        return math.isinf(self.tau)

    @property
    def sigma_over_2pi_mhz(self) -> float:
        return self.sigma / TWO_PI

    @classmethod
    def from_mhz(cls, sigma_mhz: float, tau: float) -> "OuParams":
        """Build from an ordinary frequency in MHz (sigma = 2*pi*sigma_mhz)."""
        return cls(TWO_PI * sigma_mhz, tau)


ZERO_NOISE = OuParams(0.0, 1.0)


@dataclass(frozen=True)
class NoiseTrace:
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.times.shape != self.values.shape:
            raise ValueError("times and values must have the same length")


@dataclass(frozen=True)
class CoherenceTimes:
    """Free-evolution (Ramsey) and Hahn-echo 1/e decay times in us."""

    t2_star: float
    t2_he: float

    def __post_init__(self):
        if not (0 < self.t2_star <= self.t2_he):
            raise ValueError(
                f"need 0 < t2_star <= t2_he, got ({self.t2_star}, {self.t2_he})"
            )


def _check_grid(times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise ValueError("time grid must be a non-empty 1-D array")
    if times.size > 1 and not np.all(np.diff(times) > 0):
        raise ValueError("time grid must be strictly increasing")
    return times


def ou_update(x, dt, params: OuParams, innovation):
    """Advance OU values by ``dt`` with the exact transition.

    ``x * exp(-dt/tau) + innovation * sigma * sqrt(1 - exp(-2 dt/tau))``;
    the identity for a quasi-static process.
    """
    if params.is_static:
        return np.asarray(x, dtype=float) * 1.0
    decay = math.exp(-dt / params.tau)
    spread = params.sigma * math.sqrt(-math.expm1(-2.0 * dt / params.tau))
    return x * decay + innovation * spread


def ou_sample_batch(
    params: OuParams, times, n_samples: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw ``n_samples`` stationary OU realizations on ``times``.

    Returns an array of shape ``(n_samples, len(times))``.
    """
    times = _check_grid(times)
    out = np.empty((n_samples, times.size))
    out[:, 0] = params.sigma * rng.standard_normal(n_samples)
    if params.is_static or params.sigma == 0.0:
        out[:, 1:] = out[:, :1]
        return out
    steps = np.diff(times)
    innovations = rng.standard_normal((n_samples, steps.size))
    for k, dt in enumerate(steps):
        out[:, k + 1] = ou_update(out[:, k], dt, params, innovations[:, k])
    return out


def ou_sample_trace(params: OuParams, grid, rng: np.random.Generator) -> NoiseTrace:
    """One realization of the fully relaxed OU process on ``grid``."""
    times = _check_grid(grid)
    return NoiseTrace(times, ou_sample_batch(params, times, 1, rng)[0])


def ou_autocovariance(params: OuParams, lag) -> np.ndarray | float:
    lag = np.abs(np.asarray(lag, dtype=float))
    if params.is_static:
        out = np.full_like(lag, params.variance)
    else:
        out = params.variance * np.exp(-lag / params.tau)
    return float(out) if out.ndim == 0 else out


def ou_integrated_step(x, dt: float, params: OuParams, rng: np.random.Generator):
    """Jointly sample ``X(t+dt)`` and ``int_t^{t+dt} X`` given ``X(t) = x``.

    Both are Gaussian conditional on ``x``; sampling them together keeps
    accumulated phases exact on any grid.
    """
    x = np.asarray(x, dtype=float)
    if dt < 0:
        raise ValueError("step must be >= 0")
    if params.is_static or params.sigma == 0.0 or dt == 0:
        return x.copy(), x * dt
    tau, var = params.tau, params.variance
    r = dt / tau
    a = math.exp(-r)
    one_minus_a = -math.expm1(-r)
    var_x = var * -math.expm1(-2.0 * r)
    # 2r - 3 + 4a - a^2 written without cancellation for small r
    var_i = var * tau**2 * (2.0 * _phi(r) - one_minus_a**2)
    cov = var * tau * one_minus_a**2
    n1 = rng.standard_normal(x.shape)
    n2 = rng.standard_normal(x.shape)
    x_next = a * x + math.sqrt(var_x) * n1
    resid = max(var_i - cov**2 / var_x, 0.0)
    integral = (
        tau * one_minus_a * x
        + cov / math.sqrt(var_x) * n1
        + math.sqrt(resid) * n2
    )
    return x_next, integral


def _phi(x):
    """``x - 1 + exp(-x)`` without cancellation for small ``x``."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-2
    xs = np.where(small, x, 0.0)
    series = xs**2 * (0.5 - xs * (1 / 6 - xs * (1 / 24 - xs * (1 / 120 - xs / 720))))
    xl = np.where(small, 1.0, x)
    direct = xl + np.expm1(-xl)
    out = np.where(small, series, direct)
    return float(out) if out.ndim == 0 else out


def _require_finite_tau(params: OuParams):
    if params.is_static:
        raise ValueError("closed-form coherence requires a finite correlation time")


def free_exponent(params: OuParams, t):
    _require_finite_tau(params)
    return params.variance * params.tau**2 * _phi(np.asarray(t, dtype=float) / params.tau)


def hahn_exponent(params: OuParams, T):
    _require_finite_tau(params)
    h = np.asarray(T, dtype=float) / (2.0 * params.tau)
    return params.variance * params.tau**2 * (2.0 * _phi(h) - np.expm1(-h) ** 2)


def _check_nonneg(t):
    if np.any(np.asarray(t) < 0):
        raise ValueError("evolution time must be >= 0")


def free_coherence(params: OuParams, t):
    """Ensemble coherence after free evolution for time ``t``."""
    _check_nonneg(t)
    return np.exp(-free_exponent(params, t))


def hahn_coherence(params: OuParams, T):
    """Ensemble coherence at readout ``T`` with an ideal pi pulse at ``T/2``."""
    _check_nonneg(T)
    return np.exp(-hahn_exponent(params, T))


def sigma_from_tau(tau: float, t2_star: float) -> float:
    """Noise strength that puts the free-evolution 1/e point at ``t2_star``."""
    if not (tau > 0 and math.isfinite(tau) and t2_star > 0):
        raise ValueError("tau and t2_star must be positive and finite")
    return 1.0 / (tau * math.sqrt(_phi(t2_star / tau)))


def _echo_mismatch(tau: float, t2_star: float, t2_he: float) -> float:
    # equal decay exponents at the two 1/e times, scaled by 1/tau
    h = t2_he / (2.0 * tau)
    return 2.0 * _phi(h) - math.expm1(-h) ** 2 - _phi(t2_star / tau)


def _bracketed_root(fn, lo: float, hi: float, what: str) -> float:
    """Root of ``fn`` in log space on ``[lo, hi]``, to 1e-12 relative."""
    g = lambda u: fn(math.exp(u))
    a, b = math.log(lo), math.log(hi)
    ga, gb = g(a), g(b)
    if ga == 0.0:
        return lo
    if gb == 0.0:
        return hi
    if np.sign(ga) == np.sign(gb):
        raise CalibrationError(f"no sign change while solving for {what} on [{lo:g}, {hi:g}]")
    return math.exp(brentq(g, a, b, xtol=1e-13, rtol=4 * np.finfo(float).eps, maxiter=500))


def calibrate_from_coherence(times: CoherenceTimes) -> OuParams:
    """Solve for (sigma, tau) reproducing measured Ramsey and echo times."""
    s, h = times.t2_star, times.t2_he
    if not h > s:
        raise CalibrationError("t2_he must exceed t2_star")
    tau = _bracketed_root(
        lambda tau: _echo_mismatch(tau, s, h), s / 100.0, 1e4 * h, "tau"
    )
    return OuParams(sigma_from_tau(tau, s), tau)


def echo_time(params: OuParams) -> float:
    """Hahn-echo 1/e time of ``params``."""
    _require_finite_tau(params)
    if params.sigma == 0:
        return math.inf
    # exponent grows at least like sigma^2 T^3/(12 tau) and at most sigma^2 T^2/2
    lo = 1e-6 / params.sigma
    hi = max(10.0 / params.sigma, 1.0)
    while hahn_exponent(params, hi) < 1.0:
        hi *= 10.0
    return _bracketed_root(lambda T: float(hahn_exponent(params, T)) - 1.0, lo, hi, "t2_he")


def predict_from_tau(tau: float, t2_star: float) -> tuple[float, float]:
    """Forward calibration: ``(sigma, t2_he)`` for a given ``tau`` and ``t2_star``."""
    sigma = sigma_from_tau(tau, t2_star)
    return sigma, echo_time(OuParams(sigma, tau))


TABLE1_T2_STAR = 0.1
TABLE1_TAUS = (100.0, 10.0, 1.0, 0.1, 0.01)


@dataclass(frozen=True)
class CalibrationRow:
    t2_star_us: float
    tau_us: float
    sigma_rad_per_us: float
    t2_he_us: float

    @property
    def sigma_over_2pi_MHz(self) -> float:
        return self.sigma_rad_per_us / TWO_PI

    @property
    def params(self) -> OuParams:
        return OuParams(self.sigma_rad_per_us, self.tau_us)


def calibration_table(
    t2_star: float = TABLE1_T2_STAR, taus: Sequence[float] = TABLE1_TAUS
) -> list[CalibrationRow]:
    rows = []
    for tau in taus:
        sigma, t2_he = predict_from_tau(tau, t2_star)
        rows.append(CalibrationRow(t2_star, tau, sigma, t2_he))
    return rows


def delta_params_for(tau: float, t2_star: float = TABLE1_T2_STAR) -> OuParams:
    """Detuning noise for one row of the tau sweep at fixed ``t2_star``."""
    return OuParams(sigma_from_tau(tau, t2_star), tau)


AMPLITUDE_NOISE = OuParams(0.05, INFINITE)

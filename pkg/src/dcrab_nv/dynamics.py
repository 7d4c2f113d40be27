"""Stochastic rotating-frame qubit dynamics and ensemble statistics.

Basis: index 0 is the upper state |1>, index 1 the lower state |0>, so
``sigma_z = diag(1, -1)`` and the ground state has ``<sigma_z> = -1``.

Every bin propagator is an SU(2) matrix ``[[a, -conj(b)], [b, conj(a)]]``;
the batched engine carries ``(a, b)`` per noise sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import rng as rngmod
from .noise import (
    AMPLITUDE_NOISE,
    NoiseTrace,
    OuParams,
    ZERO_NOISE,
    delta_params_for,
    ou_integrated_step,
    ou_sample_batch,
)
from .pulse import Waveform, rectangular_pulse

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
EXCITED = np.array([[1, 0], [0, 0]], dtype=complex)  # |1><1|
GROUND = np.array([[0, 0], [0, 1]], dtype=complex)  # |0><0|

# cap on samples x bins held in memory at once
_CHUNK_ELEMENTS = 4_000_000


def pure_state(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    psi = psi / np.linalg.norm(psi)
    return np.outer(psi, psi.conj())


def check_density_matrix(rho, atol: float = 1e-10) -> np.ndarray:
    """Validate a 2x2 density matrix and return it as a complex array."""
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (2, 2):
        raise ValueError(f"expected a 2x2 matrix, got shape {rho.shape}")
    if not np.allclose(rho, rho.conj().T, atol=1e-12):
        raise ValueError("density matrix is not Hermitian")
    if abs(np.trace(rho) - 1) > 1e-12:
        raise ValueError("density matrix trace differs from 1")
    if np.linalg.eigvalsh(rho).min() < -atol:
        raise ValueError("density matrix has a negative eigenvalue")
    return rho


def is_pure(rho, atol: float = 1e-12) -> bool:
    return abs(np.real(np.trace(rho @ rho)) - 1.0) < atol


def rho_to_list(rho) -> list[float]:
    """Flatten a 2x2 matrix into 8 reals: (re, im) of rho00, rho01, rho10, rho11."""
    flat = np.asarray(rho, dtype=complex).reshape(4)
    return [float(v) for z in flat for v in (z.real, z.imag)]


def rho_from_list(values: Sequence[float]) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.size != 8:
        raise ValueError("density matrix needs 8 real numbers")
    return (v[0::2] + 1j * v[1::2]).reshape(2, 2)


# --- propagators -------------------------------------------------------------


def _su2(delta, omega_eff, phi, dt):
    """``(a, b)`` of ``exp(-i dt [delta/2 sz + omega_eff/2 (cos phi sx + sin phi sy)])``."""
    norm = np.hypot(delta, omega_eff)
    half = 0.5 * dt * norm
    # sin(half)/norm without dividing by zero
    s = 0.5 * dt * np.sinc(half / math.pi)
    a = np.cos(half) - 1j * s * delta
    b = s * omega_eff * (np.sin(phi) - 1j * np.cos(phi))
    return a, b


def su2_matrix(a, b) -> np.ndarray:
    return np.array([[a, -np.conj(b)], [b, np.conj(a)]])


def bin_propagator(delta: float, omega_eff: float, phi: float, dt: float) -> np.ndarray:
    """Exact 2x2 propagator of one bin with constant detuning and drive."""
    if not dt > 0:
        raise ValueError("bin width must be positive")
    return su2_matrix(*_su2(float(delta), float(omega_eff), float(phi), float(dt)))


def _compose(a2, b2, a1, b1):
    """``U2 @ U1`` in SU(2) parameters."""
    return a2 * a1 - np.conj(b2) * b1, b2 * a1 + np.conj(a2) * b1


def _apply(a, b, rho0):
    """Elements ``(rho00, rho01)`` of ``U rho0 U^dagger``."""
    p, c, q = rho0[0, 0].real, rho0[0, 1], rho0[1, 1].real
    rho00 = (np.abs(a) ** 2) * p + (np.abs(b) ** 2) * q - 2.0 * np.real(a * b * c)
    rho01 = a * np.conj(b) * (p - q) + a * a * c - np.conj(b) ** 2 * np.conj(c)
    return rho00, rho01


def _assemble(rho00, rho01) -> np.ndarray:
    out = np.empty(np.shape(rho00) + (2, 2), dtype=complex)
    out[..., 0, 0] = rho00
    out[..., 0, 1] = rho01
    out[..., 1, 0] = np.conj(rho01)
    out[..., 1, 1] = 1.0 - rho00
    return out


def _propagate(rabi, phi, delta, dt, eps=None, record_every: Optional[int] = None):
    """Accumulate bin propagators for a batch of noise samples.

    ``rabi`` and ``phi`` are per-bin arrays, ``delta`` has shape
    ``(n_samples, n_bins)``, ``eps`` is ``None``, ``(n_samples,)`` or
    ``(n_samples, n_bins)``. Returns final ``(a, b)`` and, when
    ``record_every`` is set, the list of ``(a, b)`` after every
    ``record_every`` bins (including the identity at t = 0).
    """
    n_samples, n_bins = delta.shape
    a = np.ones(n_samples, dtype=complex)
    b = np.zeros(n_samples, dtype=complex)
    snaps = [(a, b)] if record_every else None
    if eps is not None:
        eps = np.asarray(eps, dtype=float)
    for k in range(n_bins):
        w = rabi[k]
        if eps is not None:
            w = w * (1.0 + (eps if eps.ndim == 1 else eps[:, k]))
        ak, bk = _su2(delta[:, k], w, phi[k], dt)
        a, b = _compose(ak, bk, a, b)
        if record_every and (k + 1) % record_every == 0:
            snaps.append((a, b))
    return a, b, snaps


# --- configuration and results -----------------------------------------------


@dataclass(frozen=True)
class SimulationConfig:
    """Noise model and sampling sizes for ensemble simulations.

    ``noise_substeps`` refines the noise grid inside each pulse bin (1 holds
    the detuning constant per bin, sampled at the bin's left edge).
    """

    delta_params: OuParams = ZERO_NOISE
    eps_params: Optional[OuParams] = None
    n_sample: int = 1500
    n_rep: int = 100
    seed: int = 0
    initial_state: np.ndarray = field(default_factory=lambda: GROUND.copy())
    noise_substeps: int = 1

    def __post_init__(self):
        if self.n_sample < 1 or self.n_rep < 1:
            raise ValueError("n_sample and n_rep must be >= 1")
        if self.noise_substeps < 1:
            raise ValueError("noise_substeps must be >= 1")
        check_density_matrix(self.initial_state)

    def to_dict(self) -> dict:
        def ou(p):
            return None if p is None else {"sigma_rad_per_us": p.sigma, "tau_us": p.tau}

        return {
            "delta_params": ou(self.delta_params),
            "eps_params": ou(self.eps_params),
            "n_sample": self.n_sample,
            "n_rep": self.n_rep,
            "seed": self.seed,
            "initial_state": rho_to_list(self.initial_state),
            "noise_substeps": self.noise_substeps,
        }


def paper_simulation(tau: float, *, eps: bool = True, n_sample=1500, n_rep=100, seed=0, **kw):
    """Simulation settings for one row of the tau sweep (T2* = 0.1 us)."""
    return SimulationConfig(
        delta_params_for(tau),
        AMPLITUDE_NOISE if eps else None,
        n_sample,
        n_rep,
        seed,
        **kw,
    )


@dataclass
class NoiseRealization:
    """Noise values for a batch of samples on a fixed (refined) bin grid."""

    delta: np.ndarray  # (n_samples, n_bins_fine)
    eps: Optional[np.ndarray]  # (n_samples,) or (n_samples, n_bins_fine)
    dt: float
    label: tuple = ()

    @property
    def n_samples(self) -> int:
        return self.delta.shape[0]


def draw_realization(
    config: SimulationConfig, pulse: Waveform, *key: int, n_samples: Optional[int] = None
) -> NoiseRealization:
    """Sample detuning and amplitude noise for ``pulse`` from stream ``key``."""
    n = config.n_sample if n_samples is None else n_samples
    m = config.noise_substeps
    dt = pulse.dt / m
    grid = np.arange(pulse.n_bins * m) * dt
    g_delta = rngmod.stream(config.seed, *key, rngmod.DELTA)
    delta = ou_sample_batch(config.delta_params, grid, n, g_delta)
    eps = None
    if config.eps_params is not None:
        g_eps = rngmod.stream(config.seed, *key, rngmod.EPSILON)
        if config.eps_params.is_static:
            eps = config.eps_params.sigma * g_eps.standard_normal(n)
        else:
            eps = ou_sample_batch(config.eps_params, grid, n, g_eps)
    return NoiseRealization(delta, eps, dt, tuple(key))


def final_states(pulse: Waveform, noise: NoiseRealization, rho0=GROUND) -> np.ndarray:
    """Per-sample final density matrices, shape ``(n_samples, 2, 2)``."""
    m = round(pulse.dt / noise.dt)
    fine = pulse.refine(m)
    if noise.delta.shape[1] != fine.n_bins:
        raise ValueError("noise grid does not match the pulse bins")
    a, b, _ = _propagate(fine.rabi, fine.phi, noise.delta, fine.dt, noise.eps)
    return _assemble(*_apply(a, b, np.asarray(rho0, dtype=complex)))


def evolve_sample(
    pulse: Waveform,
    delta_trace: NoiseTrace,
    eps_trace: Optional[NoiseTrace] = None,
    initial=GROUND,
) -> np.ndarray:
    """Density-matrix trajectory for one noise realization.

    Noise traces are sampled on the pulse bin edges (or left edges only) and
    held constant within each bin. Returns ``(n_bins + 1, 2, 2)``.
    """
    rho0 = check_density_matrix(initial)
    edges = pulse.edges

    def per_bin(trace: NoiseTrace, name: str) -> np.ndarray:
        t = np.asarray(trace.times, dtype=float)
        if t.size == edges.size and np.allclose(t, edges, atol=1e-12):
            return np.asarray(trace.values, dtype=float)[:-1]
        if t.size == edges.size - 1 and np.allclose(t, edges[:-1], atol=1e-12):
            return np.asarray(trace.values, dtype=float)
        raise ValueError(f"{name} trace is not sampled on the pulse bin edges")

    delta = per_bin(delta_trace, "delta")[None, :]
    eps = None if eps_trace is None else per_bin(eps_trace, "eps")[None, :]
    _, _, snaps = _propagate(pulse.rabi, pulse.phi, delta, pulse.dt, eps, record_every=1)
    a = np.array([s[0][0] for s in snaps])
    b = np.array([s[1][0] for s in snaps])
    return _assemble(*_apply(a, b, rho0))


def state_infidelity(states, target) -> float:
    """One minus the mean root fidelity of ``states`` to ``target``.

    Pure targets use ``sqrt(<t|rho|t>)``; mixed targets the Uhlmann form
    ``tr sqrt(sqrt(rho) target sqrt(rho))``.
    """
    target = check_density_matrix(target)
    states = np.asarray(states, dtype=complex).reshape(-1, 2, 2)
    return float(1.0 - np.mean(fidelities(states, target)))


def fidelities(states, target) -> np.ndarray:
    states = np.asarray(states, dtype=complex).reshape(-1, 2, 2)
    if is_pure(target):
        w, v = np.linalg.eigh(target)
        t = v[:, -1]
        overlap = np.real(np.einsum("i,nij,j->n", t.conj(), states, t))
        return np.sqrt(np.clip(overlap, 0.0, None))
    w, v = np.linalg.eigh(states)
    sqrt_rho = (v * np.sqrt(np.clip(w, 0.0, None))[:, None, :]) @ v.conj().transpose(0, 2, 1)
    inner = sqrt_rho @ target @ sqrt_rho
    ev = np.linalg.eigvalsh(0.5 * (inner + inner.conj().transpose(0, 2, 1)))
    return np.sum(np.sqrt(np.clip(ev, 0.0, None)), axis=1)


def _fidelity_from_rho00(rho00, rho01, target) -> np.ndarray:
    if np.allclose(target, EXCITED, atol=1e-15):
        return np.sqrt(np.clip(rho00, 0.0, None))
    return fidelities(_assemble(rho00, rho01), target)


@dataclass
class EnsembleResult:
    """Sample-averaged observables with spread across repetitions."""

    times: np.ndarray
    mean_sigma_z: np.ndarray
    std_sigma_z: np.ndarray
    rep_sigma_z: np.ndarray  # (n_rep, n_times)
    j_values: Optional[np.ndarray] = None  # one J per repetition
    final_states: Optional[np.ndarray] = None  # (n_rep, n_sample, 2, 2)

    @property
    def j_mean(self) -> Optional[float]:
        return None if self.j_values is None else float(np.mean(self.j_values))

    @property
    def j_std(self) -> Optional[float]:
        if self.j_values is None:
            return None
        return float(np.std(self.j_values, ddof=1)) if self.j_values.size > 1 else 0.0


def _std(x, axis=0):
    x = np.asarray(x)
    if x.shape[axis] < 2:
        return np.zeros(np.delete(x.shape, axis))
    return np.std(x, axis=axis, ddof=1)


def ensemble_average(
    pulse: Waveform,
    config: SimulationConfig,
    target=None,
    *,
    retain_states: bool = False,
    purpose: int = rngmod.ENSEMBLE,
) -> EnsembleResult:
    """Average ``<sigma_z>`` over ``n_sample`` noise draws, repeated ``n_rep`` times.

    Repetition ``r`` uses the random stream ``(seed, purpose, r)``, so any
    subset of repetitions can be regenerated independently.
    """
    rho0 = config.initial_state
    m = config.noise_substeps
    fine = pulse.refine(m)
    if target is not None:
        target = check_density_matrix(target)
    reps_per_chunk = max(1, _CHUNK_ELEMENTS // (config.n_sample * fine.n_bins))

    rep_z, j_values, kept = [], [], []
    for start in range(0, config.n_rep, reps_per_chunk):
        reps = range(start, min(config.n_rep, start + reps_per_chunk))
        noises = [draw_realization(config, pulse, purpose, r) for r in reps]
        delta = np.concatenate([nz.delta for nz in noises])
        eps = None if noises[0].eps is None else np.concatenate([nz.eps for nz in noises])
        _, _, snaps = _propagate(fine.rabi, fine.phi, delta, fine.dt, eps, record_every=m)
        z = np.empty((len(reps), len(snaps)))
        for i, (a, b) in enumerate(snaps):
            rho00, _ = _apply(a, b, rho0)
            z[:, i] = (2.0 * rho00 - 1.0).reshape(len(reps), -1).mean(axis=1)
        rep_z.append(z)
        a, b = snaps[-1]
        rho00, rho01 = _apply(a, b, rho0)
        if target is not None:
            fid = _fidelity_from_rho00(rho00, rho01, target)
            j_values.append(1.0 - fid.reshape(len(reps), -1).mean(axis=1))
        if retain_states:
            kept.append(_assemble(rho00, rho01).reshape(len(reps), config.n_sample, 2, 2))

    rep_z = np.concatenate(rep_z)
    return EnsembleResult(
        times=pulse.edges,
        mean_sigma_z=rep_z.mean(axis=0),
        std_sigma_z=_std(rep_z),
        rep_sigma_z=rep_z,
        j_values=np.concatenate(j_values) if target is not None else None,
        final_states=np.concatenate(kept) if retain_states else None,
    )


def rabi_analytic(omega1, delta, t):
    """``<sigma_z>`` of a detuned Rabi oscillation starting in |0>."""
    omega1, delta, t = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (omega1, delta, t)))
    gen2 = omega1**2 + delta**2
    safe = np.where(gen2 > 0, gen2, 1.0)
    ratio = np.where(gen2 > 0, (omega1**2 - delta**2) / safe, 0.0)
    half = np.sqrt(gen2) * t / 2
    out = ratio * np.sin(half) ** 2 - np.cos(half) ** 2
    return float(out) if out.ndim == 0 else out


# --- coherence decay ---------------------------------------------------------


@dataclass
class CoherenceCurve:
    times: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    rep_values: np.ndarray


def _check_time_grid(t_grid) -> np.ndarray:
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size == 0 or np.any(t < 0) or np.any(np.diff(t) <= 0):
        raise ValueError("time grid must be non-negative and strictly increasing")
    return t


def _rep_rngs(config: SimulationConfig, which: int):
    return [rngmod.stream(config.seed, rngmod.COHERENCE, which, r) for r in range(config.n_rep)]


def simulate_ramsey(config: SimulationConfig, t_grid, method: str = "exact", dt: float = 0.001):
    """Magnitude of the sample-averaged coherence ``|2 rho01|`` under free evolution.

    ``method="exact"`` samples accumulated phases jointly with the OU
    process (exact on any grid); ``"binned"`` holds the detuning constant
    over bins of width ``dt`` and uses the bin propagators.
    """
    t = _check_time_grid(t_grid)
    params = config.delta_params
    values = np.empty((config.n_rep, t.size))
    for r, g in enumerate(_rep_rngs(config, 0)):
        if method == "exact":
            x = params.sigma * g.standard_normal(config.n_sample)
            phase = np.zeros(config.n_sample)
            prev = 0.0
            for i, ti in enumerate(t):
                if ti > prev:
                    x, integral = ou_integrated_step(x, ti - prev, params, g)
                    phase += integral
                    prev = ti
                values[r, i] = np.abs(np.mean(np.exp(-1j * phase)))
        elif method == "binned":
            values[r] = _binned_coherence(params, t, config.n_sample, dt, g, echo=False)
        else:
            raise ValueError(f"unknown method {method!r}")
    return CoherenceCurve(t, values.mean(axis=0), _std(values), values)


def simulate_hahn(config: SimulationConfig, T_grid, method: str = "exact", dt: float = 0.001):
    """Echo coherence at readout ``T`` with an ideal, noise-free pi pulse at ``T/2``.

    The pi pulse conjugates the coherence; see :func:`simulate_ramsey` for
    ``method``.
    """
    T = _check_time_grid(T_grid)
    params = config.delta_params
    values = np.empty((config.n_rep, T.size))
    for r, g in enumerate(_rep_rngs(config, 1)):
        if method == "exact":
            for i, Ti in enumerate(T):
                x = params.sigma * g.standard_normal(config.n_sample)
                x, first = ou_integrated_step(x, Ti / 2, params, g)
                _, second = ou_integrated_step(x, Ti / 2, params, g)
                values[r, i] = np.abs(np.mean(np.exp(1j * (first - second))))
        elif method == "binned":
            values[r] = _binned_coherence(params, T, config.n_sample, dt, g, echo=True)
        else:
            raise ValueError(f"unknown method {method!r}")
    return CoherenceCurve(T, values.mean(axis=0), _std(values), values)


_PLUS_Y = pure_state([1.0, 1.0j])
_PI_X = (0.0 + 0.0j, -1.0j)  # exp(-i pi/2 sigma_x) = -i sigma_x


def _binned_coherence(params, times, n, dt, g, echo):
    out = np.empty(times.size)
    for i, T in enumerate(times):
        if T == 0:
            out[i] = 1.0
            continue
        half_bins = max(1, int(round(T / (2 * dt)))) if echo else max(1, int(round(T / dt)))
        step = (T / 2 if echo else T) / half_bins
        n_bins = 2 * half_bins if echo else half_bins
        delta = ou_sample_batch(params, np.arange(n_bins) * step, n, g)
        zeros = np.zeros(half_bins)
        a, b, _ = _propagate(zeros, zeros, delta[:, :half_bins], step)
        if echo:
            a, b = _compose(*_PI_X, a, b)
            a2, b2, _ = _propagate(zeros, zeros, delta[:, half_bins:], step)
            a, b = _compose(a2, b2, a, b)
        _, rho01 = _apply(a, b, _PLUS_Y)
        out[i] = np.abs(np.mean(2.0 * rho01))
    return out


# --- noise dominance -----------------------------------------------------------


DOMINANCE_REGIMES = {
    "short_small": (0.02, math.pi / 2),
    "short_large": (0.02, 20 * math.pi),
    "long_small": (1.0, math.pi / 2),
    "long_large": (1.0, 20 * math.pi),
}


@dataclass(frozen=True)
class DominanceConfig:
    """Rectangular-pulse regimes as ``name -> (duration us, rotation angle rad)``."""

    delta_params: OuParams = field(default_factory=lambda: delta_params_for(0.1))
    eps_params: OuParams = AMPLITUDE_NOISE
    regimes: dict = field(default_factory=lambda: dict(DOMINANCE_REGIMES))
    bin_width: float = 0.002
    min_bins: int = 50
    phi: float = math.pi / 2
    n_sample: int = 1500
    n_rep: int = 100
    seed: int = 0


@dataclass
class RegimeResult:
    duration: float
    rotation: float
    deviation_mean: dict
    deviation_std: dict


def noise_dominance_study(config: DominanceConfig = DominanceConfig()) -> dict[str, RegimeResult]:
    """Max deviation of mean ``<sigma_z>`` from ``-cos(Omega1 t)`` per noise source."""
    sources = {
        "delta": (config.delta_params, None),
        "eps": (ZERO_NOISE, config.eps_params),
        "both": (config.delta_params, config.eps_params),
    }
    report = {}
    for name, (duration, rotation) in config.regimes.items():
        n_bins = max(config.min_bins, int(round(duration / config.bin_width)))
        omega1 = rotation / duration
        pulse = rectangular_pulse(omega1, 1.0, config.phi, duration, n_bins, amplitude_limit=None)
        ideal = -np.cos(omega1 * pulse.edges)
        means, stds = {}, {}
        for label, (dp, ep) in sources.items():
            sim = SimulationConfig(dp, ep, config.n_sample, config.n_rep, config.seed)
            res = ensemble_average(pulse, sim)
            dev = np.max(np.abs(res.rep_sigma_z - ideal), axis=1)
            means[label] = float(dev.mean())
            stds[label] = float(_std(dev))
        report[name] = RegimeResult(duration, rotation, means, stds)
    return report

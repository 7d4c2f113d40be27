"""Time-binned control waveforms and the chopped random Fourier basis."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Literal, Optional, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
DEFAULT_OMEGA1 = TWO_PI  # rad/us, i.e. 1 MHz peak Rabi frequency
DEFAULT_AMPLITUDE_LIMIT = 10.0 * math.pi  # rad/us
BETA_MIN = 0.1

PhiMode = Literal["fixed", "constant", "time-varying"]
PHI_MODES = ("fixed", "constant", "time-varying")


@dataclass(frozen=True, eq=False)
class Waveform:
    """Piecewise-constant pulse: amplitude modulation ``f`` and phase ``phi`` per bin.

    The Rabi frequency in bin ``k`` is ``omega1 * f[k]`` (rad/us). With
    ``amplitude_limit=None`` no bound is enforced.
    """

    f: np.ndarray
    phi: np.ndarray
    dt: float
    omega1: float = DEFAULT_OMEGA1
    amplitude_limit: Optional[float] = DEFAULT_AMPLITUDE_LIMIT

    def __post_init__(self):
        f = np.array(self.f, dtype=float).reshape(-1)
        phi = np.array(self.phi, dtype=float).reshape(-1)
        if phi.size == 1 and f.size > 1:
            phi = np.full_like(f, phi[0])
        if f.shape != phi.shape:
            raise ValueError(f"f and phi lengths differ: {f.size} vs {phi.size}")
        if f.size == 0:
            raise ValueError("waveform needs at least one bin")
        if not self.dt > 0:
            raise ValueError(f"bin width must be positive, got {self.dt}")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(phi))):
            raise ValueError("waveform values must be finite")
        f.flags.writeable = False
        phi.flags.writeable = False
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "phi", phi)
        if self.amplitude_limit is not None:
            peak = float(np.max(np.abs(self.omega1 * f)))
            if peak > self.amplitude_limit * (1 + 1e-12):
                raise ValueError(
                    f"|omega1*f| reaches {peak:.6g} rad/us, above the limit "
                    f"{self.amplitude_limit:.6g}"
                )

    def __eq__(self, other):
        if not isinstance(other, Waveform):
            return NotImplemented
        return (
            self.dt == other.dt
            and self.omega1 == other.omega1
            and self.amplitude_limit == other.amplitude_limit
            and np.array_equal(self.f, other.f)
            and np.array_equal(self.phi, other.phi)
        )

    __hash__ = None

    @property
    def n_bins(self) -> int:
        return self.f.size

    @property
    def duration(self) -> float:
        return self.n_bins * self.dt

    @property
    def edges(self) -> np.ndarray:
        return np.arange(self.n_bins + 1) * self.dt

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.n_bins) + 0.5) * self.dt

    @property
    def rabi(self) -> np.ndarray:
        return self.omega1 * self.f

    @property
    def f_x(self) -> np.ndarray:
        return self.f * np.cos(self.phi)

    @property
    def f_y(self) -> np.ndarray:
        return self.f * np.sin(self.phi)

    @property
    def f_limit(self) -> float:
        if self.amplitude_limit is None:
            return math.inf
        return self.amplitude_limit / abs(self.omega1)

    @property
    def phi_wrapped(self) -> np.ndarray:
        return np.mod(self.phi, TWO_PI)

    def rotation_angle(self) -> float:
        return float(np.sum(self.rabi) * self.dt)

    def with_values(self, f=None, phi=None) -> "Waveform":
        return replace(
            self,
            f=self.f if f is None else f,
            phi=self.phi if phi is None else phi,
        )

    def refine(self, factor: int) -> "Waveform":
        """Split every bin into ``factor`` equal sub-bins."""
        if factor == 1:
            return self
        return replace(
            self, f=np.repeat(self.f, factor), phi=np.repeat(self.phi, factor), dt=self.dt / factor
        )


def rectangular_pulse(
    omega1: float = DEFAULT_OMEGA1,
    f_value: float = 1.0,
    phi: float = math.pi / 2,
    duration: float = 0.5,
    n_bins: int = 50,
    amplitude_limit: Optional[float] = DEFAULT_AMPLITUDE_LIMIT,
) -> Waveform:
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    return Waveform(
        np.full(n_bins, float(f_value)),
        np.full(n_bins, float(phi)),
        duration / n_bins,
        omega1,
        amplitude_limit,
    )


def initial_guess_pulse() -> Waveform:
    """Rectangular pi pulse at Omega1 = 2*pi rad/us over 0.5 us, 50 bins."""
    return rectangular_pulse(DEFAULT_OMEGA1, 1.0, math.pi / 2, 0.5, 50)


def narrow_pulse() -> Waveform:
    """Rectangular pi pulse at the amplitude limit (f = 5) over 0.1 us."""
    return rectangular_pulse(DEFAULT_OMEGA1, 5.0, math.pi / 2, 0.1, 10)


# --- chopped random Fourier basis -----------------------------------------


@dataclass(frozen=True)
class FourierBasisSet:
    """Random-frequency sine elements ``sin(2 pi beta_k t / T)``.

    Frequencies are in cycles per pulse window.
    """

    frequencies: np.ndarray
    channel: str = "f"

    @property
    def n_c(self) -> int:
        return len(self.frequencies)

    def evaluate(self, t, duration: float) -> np.ndarray:
        """Basis matrix of shape ``(n_c, len(t))``."""
        t = np.asarray(t, dtype=float)
        return np.sin(TWO_PI * np.outer(self.frequencies, t) / duration)

    def to_dict(self) -> dict:
        return {
            "channel": self.channel,
            "element": "sin",
            "frequencies": [float(b) for b in self.frequencies],
        }


def draw_basis(
    n_c: int, beta_max: float, rng: np.random.Generator, channel: str = "f"
) -> FourierBasisSet:
    if n_c < 1:
        raise ValueError("n_c must be >= 1")
    if not beta_max >= BETA_MIN:
        raise ValueError(f"beta_max must be >= {BETA_MIN}, got {beta_max}")
    freqs = rng.uniform(BETA_MIN, beta_max, size=n_c)
    if beta_max == BETA_MIN:
        freqs[:] = BETA_MIN
    return FourierBasisSet(freqs, channel)


@dataclass(frozen=True)
class ScalingSpec:
    """Edge envelope parameters. ``t_scale=None`` means "the pulse duration"."""

    sigma_scale: float = 30.0
    t_scale: Optional[float] = None

    def __post_init__(self):
        if not self.sigma_scale > 0:
            raise ValueError("sigma_scale must be positive")
        if self.t_scale is not None and not self.t_scale > 0:
            raise ValueError("t_scale must be positive")

    def window(self, duration: float) -> float:
        return duration if self.t_scale is None else self.t_scale


def scaling_function(t, scaling: ScalingSpec, duration: Optional[float] = None):
    """Edge envelope: unity inside the window, falling to zero at both ends."""
    T = scaling.t_scale if scaling.t_scale is not None else duration
    if T is None:
        raise ValueError("scaling window undefined: give t_scale or duration")
    t = np.asarray(t, dtype=float)
    s = scaling.sigma_scale
    lam = np.tanh(s * np.sin(math.pi * t / (2 * T))) * np.tanh(
        -s * np.sin(math.pi * (t - T) / (2 * T))
    )
    return float(lam) if lam.ndim == 0 else lam


@dataclass(frozen=True)
class ConstraintPolicy:
    f_limit: float = 5.0
    mode: Literal["truncate", "rescale"] = "truncate"

    def __post_init__(self):
        if not self.f_limit > 0:
            raise ValueError("f_limit must be positive")
        if self.mode not in ("truncate", "rescale"):
            raise ValueError(f"unknown constraint mode {self.mode!r}")

    def apply(self, f: np.ndarray) -> np.ndarray:
        if self.mode == "truncate":
            return np.clip(f, -self.f_limit, self.f_limit)
        peak = np.max(np.abs(f))
        if peak > self.f_limit:
            return f * (self.f_limit / peak)
        return f


@dataclass(frozen=True)
class ChannelExpansion:
    """Coefficients for one channel in one super-iteration."""

    a0: float
    coeffs: np.ndarray
    basis: FourierBasisSet

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=float).reshape(-1)
        if coeffs.size != self.basis.n_c:
            raise ValueError(
                f"{coeffs.size} coefficients for {self.basis.n_c} basis functions"
            )
        object.__setattr__(self, "coeffs", coeffs)


def expand_channel(
    prev, expansion: ChannelExpansion, t, duration: float, superiteration: int
) -> np.ndarray:
    """Dressed expansion ``a0 * prev + sum_k a_k sin(2 pi beta_k t / T)`` (unscaled)."""
    a0 = 0.0 if superiteration <= 1 else expansion.a0
    return a0 * np.asarray(prev, dtype=float) + expansion.coeffs @ expansion.basis.evaluate(
        t, duration
    )


def compose_pulse(
    prev: Waveform,
    f_expansion: ChannelExpansion,
    scaling: Optional[ScalingSpec] = ScalingSpec(),
    policy: ConstraintPolicy = ConstraintPolicy(),
    phi_mode: PhiMode = "fixed",
    *,
    superiteration: int = 2,
    phi_expansion: Optional[ChannelExpansion] = None,
    phi_offset: float = 0.0,
    base: Optional[Waveform] = None,
    scale_phi: bool = True,
) -> Waveform:
    """Build the physical pulse of one dCRAB candidate.

    Per bin midpoint ``t`` the amplitude channel is
    ``Lambda(t) * [base(t) + a0 * prev(t) + sum_k a_k sin(2 pi beta_k t / T)]``
    clipped by ``policy``; ``a0`` is ignored in the first super-iteration.
    ``prev`` carries the previous unscaled expansion, ``base`` a fixed
    offset (the initial guess). ``scaling=None`` disables the envelope.

    The phase channel follows ``phi_mode``: ``fixed`` keeps the base (or
    prev) phase, ``constant`` adds ``phi_offset``, ``time-varying`` adds the
    expansion of ``phi_expansion``, enveloped when ``scale_phi`` is set.
    """
    if phi_mode not in PHI_MODES:
        raise ValueError(f"unknown phi_mode {phi_mode!r}")
    t = prev.midpoints
    T = prev.duration
    lam = np.ones_like(t) if scaling is None else scaling_function(t, scaling, T)

    f_unscaled = expand_channel(prev.f, f_expansion, t, T, superiteration)
    if base is not None:
        f_unscaled = f_unscaled + base.f
    f = policy.apply(lam * f_unscaled)

    phi0 = (base if base is not None else prev).phi
    if phi_mode == "fixed":
        phi = phi0
    elif phi_mode == "constant":
        phi = phi0 + phi_offset
    else:
        if phi_expansion is None:
            raise ValueError("time-varying phase needs a phase expansion")
        dphi = expand_channel(prev.phi if base is not None else 0.0 * t, phi_expansion, t, T, superiteration)
        phi = phi0 + (lam * dphi if scale_phi else dphi)

    omega1 = (base or prev).omega1
    return Waveform(f, phi, prev.dt, omega1, policy.f_limit * abs(omega1))


# --- measured-trace comparison ----------------------------------------------


@dataclass(frozen=True)
class Alignment:
    mae: float
    offset: int
    aligned: np.ndarray
    numeric: np.ndarray


def block_average(values, block: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    n = values.size // block
    return values[: n * block].reshape(n, block).mean(axis=1)


def align_and_mae(numeric, measured_volts, block: int = 10) -> Alignment:
    """Normalize a measured trace and align it to a numeric channel.

    ``numeric`` holds per-bin amplitudes (rectified here); ``measured_volts``
    is sampled ``block`` times finer. The measured trace is block-averaged,
    floored at zero, scaled to the numeric peak and shifted by whole bins to
    minimize the mean absolute error. Samples shifted in from outside the
    measured window sit at the floor.
    """
    num = np.abs(np.asarray(numeric, dtype=float))
    meas = block_average(measured_volts, block)
    n, m = num.size, meas.size
    if m < n:
        raise ValueError(
            f"measured trace covers {m} bins after averaging, numeric window needs {n}"
        )
    meas = meas - meas.min()
    peak = meas.max()
    if peak <= 0:
        raise ValueError("measured trace is flat")
    meas = meas * (num.max() / peak)

    padded = np.concatenate([np.zeros(n - 1), meas, np.zeros(n - 1)])
    best = None
    for offset in sorted(range(-(n - 1), m), key=lambda o: (abs(o), o)):
        window = padded[offset + n - 1 : offset + 2 * n - 1]
        mae = float(np.mean(np.abs(num - window)))
        if best is None or mae < best.mae:
            best = Alignment(mae, offset, window, num)
    return best

"""dCRAB pulse optimization driven by an adaptive Nelder-Mead search.

Budgets and convergence windows count cost-function evaluations.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import rng as rngmod
from .dynamics import (
    EXCITED,
    NoiseRealization,
    SimulationConfig,
    draw_realization,
    ensemble_average,
    final_states,
    state_infidelity,
)
from .pulse import (
    PHI_MODES,
    ChannelExpansion,
    ConstraintPolicy,
    FourierBasisSet,
    ScalingSpec,
    Waveform,
    compose_pulse,
    draw_basis,
    expand_channel,
)

log = logging.getLogger(__name__)


class BudgetError(ValueError):
    """Raised when the evaluation budget cannot cover one simplex."""


# --- Nelder-Mead ---------------------------------------------------------------


class _Stop(Exception):
    def __init__(self, reason: str):
        self.reason = reason


@dataclass
class NelderMeadResult:
    x: np.ndarray  # best vertex of the final simplex (by stored value)
    fun: float
    history: list  # every objective value, in evaluation order
    points: list  # argument of every evaluation
    reevaluated: list  # True where the evaluation refreshed the incumbent
    stop_reason: str

    @property
    def n_evaluations(self) -> int:
        return len(self.history)

    @property
    def best_recorded(self) -> tuple[np.ndarray, float]:
        k = int(np.argmin(self.history))
        return self.points[k], self.history[k]


def adaptive_coefficients(n: int) -> tuple[float, float, float, float]:
    """Reflection, expansion, contraction and shrink factors for dimension ``n``."""
    shrink = 1.0 - 1.0 / n if n > 1 else 0.5
    return 1.0, 1.0 + 2.0 / n, 0.75 - 1.0 / (2.0 * n), shrink


def nelder_mead_adaptive(
    objective: Callable[[np.ndarray], float],
    x0,
    steps,
    budget: int,
    convergence: Optional[tuple[int, float]] = (100, 1e-3),
    drift_compensation: bool = False,
    xtol: float = 1e-14,
) -> NelderMeadResult:
    """Minimize ``objective`` with dimension-adaptive Nelder-Mead.

    The initial simplex is ``x0`` plus one vertex per coordinate offset by
    ``steps[i]``. The search stops when ``budget`` evaluations are spent,
    when the running best improved by less than ``eps`` per evaluation on
    average over the trailing ``window`` evaluations, or when the simplex
    collapses. With ``drift_compensation`` the incumbent vertex is
    re-evaluated every ``n + 1`` evaluations and its stored value replaced.
    Non-finite objective values count as ``+inf``.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    n = x0.size
    if n < 1:
        raise ValueError("need at least one parameter")
    steps = np.broadcast_to(np.asarray(steps, dtype=float), (n,))
    alpha, chi, gamma, sigma = adaptive_coefficients(n)

    history: list[float] = []
    points: list[np.ndarray] = []
    reeval: list[bool] = []
    running_best: list[float] = []

    def f(x, refresh=False):
        if len(history) >= budget:
            raise _Stop("budget")
        x = np.array(x, dtype=float)
        value = float(objective(x))
        if not math.isfinite(value):
            log.warning("non-finite objective at %s; vertex rejected", x)
            value = math.inf
        history.append(value)
        points.append(x)
        reeval.append(refresh)
        running_best.append(min(value, running_best[-1]) if running_best else value)
        if convergence is not None:
            window, eps = convergence
            if len(running_best) > window:
                gain = (running_best[-1 - window] - running_best[-1]) / window
                if gain < eps:
                    raise _Stop("converged")
        return value

    sim = [x0.copy()] + [x0 + steps[i] * np.eye(n)[i] for i in range(n)]
    vals: list[float] = []
    stop = "budget"
    since_refresh = 0
    try:
        for v in sim:
            vals.append(f(v))
        since_refresh = len(vals)
        while True:
            order = np.argsort(vals, kind="stable")
            sim = [sim[i] for i in order]
            vals = [vals[i] for i in order]
            if drift_compensation and since_refresh >= n + 1:
                vals[0] = f(sim[0], refresh=True)
                since_refresh = 0
                continue
            if max(np.max(np.abs(v - sim[0])) for v in sim[1:]) <= xtol:
                stop = "collapsed"
                break
            centroid = np.mean(sim[:-1], axis=0)
            worst = sim[-1]
            xr = centroid + alpha * (centroid - worst)
            fr = f(xr)
            since_refresh += 1
            if fr < vals[0]:
                xe = centroid + chi * (xr - centroid)
                fe = f(xe)
                since_refresh += 1
                sim[-1], vals[-1] = (xe, fe) if fe < fr else (xr, fr)
                continue
            if fr < vals[-2]:
                sim[-1], vals[-1] = xr, fr
                continue
            if fr < vals[-1]:
                xc = centroid + gamma * (xr - centroid)
                fc = f(xc)
                since_refresh += 1
                if fc <= fr:
                    sim[-1], vals[-1] = xc, fc
                    continue
            else:
                xc = centroid + gamma * (worst - centroid)
                fc = f(xc)
                since_refresh += 1
                if fc < vals[-1]:
                    sim[-1], vals[-1] = xc, fc
                    continue
            for i in range(1, n + 1):
                sim[i] = sim[0] + sigma * (sim[i] - sim[0])
                vals[i] = f(sim[i])
                since_refresh += 1
    except _Stop as s:
        stop = s.reason

    if len(vals) < len(sim):
        # budget ran out while building the simplex
        sim = sim[: len(vals)]
    k = int(np.argmin(vals)) if vals else 0
    x_best = sim[k] if vals else x0
    return NelderMeadResult(
        x_best, vals[k] if vals else math.inf, history, points, reeval, stop
    )


# --- cost landscapes -----------------------------------------------------------


class FreshNoiseLandscape:
    """Fluctuating cost: every call draws new noise from stream ``(seed, EVALUATION, k)``."""

    deterministic = False

    def __init__(self, sim: SimulationConfig, target=EXCITED, start: int = 0):
        self.sim = sim
        self.target = target
        self.counter = start

    def cost(self, pulse: Waveform) -> float:
        noise = draw_realization(self.sim, pulse, rngmod.EVALUATION, self.counter)
        self.counter += 1
        return state_infidelity(final_states(pulse, noise, self.sim.initial_state), self.target)


class FrozenNoiseLandscape:
    """Deterministic cost on one fixed set of noise realizations."""

    deterministic = True

    def __init__(self, sim: SimulationConfig, realization: NoiseRealization, target=EXCITED):
        self.sim = sim
        self.realization = realization
        self.target = target

    def cost(self, pulse: Waveform) -> float:
        states = final_states(pulse, self.realization, self.sim.initial_state)
        return state_infidelity(states, self.target)


def evaluate_cost(pulse: Waveform, sim: SimulationConfig, landscape=None) -> float:
    """Cost of ``pulse``; a fresh-noise landscape is created when none is given."""
    if landscape is None:
        landscape = FreshNoiseLandscape(sim)
    return landscape.cost(pulse)


@dataclass
class RepresentativeChoice:
    realization: NoiseRealization
    index: int
    j_values: np.ndarray

    @property
    def j_mean(self) -> float:
        return float(np.mean(self.j_values))

    @property
    def j_std(self) -> float:
        return float(np.std(self.j_values, ddof=1)) if self.j_values.size > 1 else 0.0


def select_representative_realization(
    pulse: Waveform, sim: SimulationConfig, target=EXCITED
) -> RepresentativeChoice:
    """Among ``n_rep`` realization sets, pick the one whose cost is nearest the mean."""
    j = np.empty(sim.n_rep)
    for r in range(sim.n_rep):
        noise = draw_realization(sim, pulse, rngmod.FROZEN, r)
        j[r] = state_infidelity(final_states(pulse, noise, sim.initial_state), target)
    index = int(np.argmin(np.abs(j - j.mean())))
    return RepresentativeChoice(draw_realization(sim, pulse, rngmod.FROZEN, index), index, j)


# --- dCRAB ---------------------------------------------------------------------


@dataclass(frozen=True)
class DcrabConfig:
    n_c: int = 5
    beta_max: float = 3.0
    phi_mode: str = "fixed"
    n_iter_total: int = 2000
    convergence_window: int = 100
    convergence_eps: float = 1e-3
    amp_variation_f: float = 3.0
    amp_variation_phi: float = 2 * math.pi
    a0_step: float = 0.3
    landscape_mode: str = "fresh"
    seed: int = 0
    scaling: Optional[ScalingSpec] = ScalingSpec()
    policy: ConstraintPolicy = ConstraintPolicy()
    drift_compensation: Optional[bool] = None  # None: on for fresh noise only
    scale_phi: bool = True
    keep_candidates: bool = False

    def __post_init__(self):
        if self.n_c < 1:
            raise ValueError("n_c must be >= 1")
        if self.phi_mode not in PHI_MODES:
            raise ValueError(f"unknown phi_mode {self.phi_mode!r}")
        if self.landscape_mode not in ("fresh", "frozen"):
            raise ValueError(f"unknown landscape_mode {self.landscape_mode!r}")
        if self.n_iter_total < 0:
            raise ValueError("n_iter_total must be >= 0")
        if 0 < self.n_iter_total < self.convergence_window:
            log.debug("budget %d is shorter than the convergence window", self.n_iter_total)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scaling"] = None if self.scaling is None else asdict(self.scaling)
        d["policy"] = asdict(self.policy)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DcrabConfig":
        d = dict(d)
        if d.get("scaling") is not None:
            d["scaling"] = ScalingSpec(**d["scaling"])
        if "policy" in d:
            d["policy"] = ConstraintPolicy(**d["policy"])
        return cls(**d)

    def dimension(self, superiteration: int) -> int:
        dressing = 1 if superiteration > 1 else 0
        if self.phi_mode == "fixed":
            return dressing + self.n_c
        if self.phi_mode == "constant":
            return dressing + self.n_c + 1
        return 2 * (dressing + self.n_c)


@dataclass
class _Checkpoint:
    superiteration: int
    n_history: int
    h_f: np.ndarray
    h_phi: np.ndarray
    phi_offset: float
    best_index: int = 0
    best_pulse: Optional[Waveform] = None

    def to_dict(self) -> dict:
        return {
            "superiteration": self.superiteration,
            "n_history": self.n_history,
            "h_f": self.h_f.tolist(),
            "h_phi": self.h_phi.tolist(),
            "phi_offset": self.phi_offset,
            "best_index": self.best_index,
            "best_pulse": None if self.best_pulse is None else waveform_to_dict(self.best_pulse),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "_Checkpoint":
        return cls(
            d["superiteration"],
            d["n_history"],
            np.asarray(d["h_f"], dtype=float),
            np.asarray(d["h_phi"], dtype=float),
            float(d["phi_offset"]),
            d.get("best_index", 0),
            None if d.get("best_pulse") is None else waveform_from_dict(d["best_pulse"]),
        )


@dataclass
class OptimizationRecord:
    """Outcome of one dCRAB run.

    ``j_history[0]`` is the initial pulse; ``superiteration_starts`` index
    the first evaluation of each super-iteration.
    """

    j_history: list
    reevaluated: list
    superiteration_starts: list
    best_pulse: Waveform
    best_j: float
    best_index: int
    j_opt_mean: float
    j_opt_std: float
    bases: list = field(default_factory=list)
    stop_reasons: list = field(default_factory=list)
    promoted_j: list = field(default_factory=list)  # stored cost of each promoted vertex
    config: Optional[DcrabConfig] = None
    simulation: Optional[dict] = None
    frozen_index: Optional[int] = None
    checkpoint: Optional[_Checkpoint] = None
    candidates_f: Optional[list] = None
    candidates_phi: Optional[list] = None
    budget_unit: str = "cost-function evaluations"

    @property
    def n_evaluations(self) -> int:
        return len(self.j_history)

    @property
    def initial_j(self) -> float:
        return self.j_history[0]

    @property
    def running_best(self) -> np.ndarray:
        return np.minimum.accumulate(self.j_history)


def _split(x: np.ndarray, cfg: DcrabConfig, s: int):
    """Unpack a parameter vector into ``(a0_f, f_coeffs, a0_phi, phi_coeffs, phi_offset)``."""
    d = 1 if s > 1 else 0
    i = 0
    a0_f = x[0] if d else 0.0
    i += d
    cf = x[i : i + cfg.n_c]
    i += cfg.n_c
    a0_phi, cphi, offset = 0.0, None, None
    if cfg.phi_mode == "constant":
        offset = x[i]
    elif cfg.phi_mode == "time-varying":
        a0_phi = x[i] if d else 0.0
        i += d
        cphi = x[i : i + cfg.n_c]
    return a0_f, cf, a0_phi, cphi, offset


def _start_vector(cfg: DcrabConfig, s: int, phi_offset: float):
    d = 1 if s > 1 else 0
    x = [1.0] * d + [0.0] * cfg.n_c
    steps = [cfg.a0_step] * d + [cfg.amp_variation_f] * cfg.n_c
    if cfg.phi_mode == "constant":
        x.append(phi_offset)
        steps.append(cfg.amp_variation_phi)
    elif cfg.phi_mode == "time-varying":
        x += [1.0] * d + [0.0] * cfg.n_c
        steps += [cfg.a0_step] * d + [cfg.amp_variation_phi] * cfg.n_c
    return np.array(x), np.array(steps)


def dcrab_optimize(
    initial: Waveform,
    config: DcrabConfig = DcrabConfig(),
    sim: SimulationConfig = SimulationConfig(),
    *,
    resume: Optional[OptimizationRecord] = None,
    target=EXCITED,
) -> OptimizationRecord:
    """Reshape ``initial`` with dressed chopped-random-basis super-iterations.

    Each candidate pulse is ``Lambda * (initial + h_s)`` clipped to the
    amplitude limit, where ``h_s = a0 * h_{s-1} + sum_k a_k sin(2 pi beta_k t/T)``
    and ``h_0 = 0``. Every super-iteration draws fresh frequencies and runs
    :func:`nelder_mead_adaptive` from ``a0 = 1, a_k = 0``; its best vertex is
    promoted to ``h_s``. The best pulse by recorded cost is finally
    re-evaluated over ``sim.n_rep`` fresh noise sets.

    Passing ``resume`` continues a previous record from its checkpoint with
    the budget of ``config``.
    """
    cfg = config
    if cfg.n_iter_total > 0 and cfg.n_iter_total < 2 + cfg.dimension(1):
        raise BudgetError(
            f"budget {cfg.n_iter_total} cannot cover the initial evaluation and a "
            f"{cfg.dimension(1) + 1}-vertex simplex"
        )
    t = initial.midpoints
    T = initial.duration
    drift = cfg.drift_compensation
    if drift is None:
        drift = cfg.landscape_mode == "fresh"

    frozen_index = None
    if cfg.landscape_mode == "frozen":
        choice = select_representative_realization(initial, sim, target)
        landscape = FrozenNoiseLandscape(sim, choice.realization, target)
        frozen_index = choice.index
    else:
        landscape = FreshNoiseLandscape(sim, target)

    history: list[float] = []
    reevaluated: list[bool] = []
    cand_f: list = []
    cand_phi: list = []
    pulses: dict[int, Waveform] = {}
    starts: list[int] = []
    bases: list[dict] = []
    reasons: list[str] = []
    promoted: list[float] = []

    def record(pulse: Waveform, value: float, refresh: bool = False):
        history.append(value)
        reevaluated.append(refresh)
        if cfg.keep_candidates:
            cand_f.append(pulse.f.tolist())
            cand_phi.append(pulse.phi.tolist())
        if value <= min(history):
            pulses[len(history) - 1] = pulse

    if resume is not None:
        ck = resume.checkpoint
        keep = ck.n_history
        history[:] = resume.j_history[:keep]
        reevaluated[:] = resume.reevaluated[:keep]
        starts = [s for s in resume.superiteration_starts if s < keep]
        bases = resume.bases[: len(starts)]
        reasons = resume.stop_reasons[: len(starts)]
        promoted = resume.promoted_j[: len(starts)]
        if resume.candidates_f is not None and cfg.keep_candidates:
            cand_f[:] = resume.candidates_f[:keep]
            cand_phi[:] = resume.candidates_phi[:keep]
        pulses[ck.best_index] = ck.best_pulse
        s, h_f, h_phi, phi_offset = ck.superiteration, ck.h_f, ck.h_phi, ck.phi_offset
        if not landscape.deterministic:
            landscape.counter = keep
    else:
        record(initial, landscape.cost(initial))
        s = 1
        h_f = np.zeros(initial.n_bins)
        h_phi = np.zeros(initial.n_bins)
        phi_offset = 0.0

    def snapshot() -> _Checkpoint:
        k = int(np.argmin(history))
        return _Checkpoint(s, len(history), h_f.copy(), h_phi.copy(), phi_offset, k, pulses[k])

    checkpoint = snapshot()

    while cfg.n_iter_total - len(history) >= cfg.dimension(s) + 1:
        checkpoint = snapshot()
        g_f = rngmod.stream(cfg.seed, rngmod.BASIS, s, 0)
        basis_f = draw_basis(cfg.n_c, cfg.beta_max, g_f, "f")
        basis_phi = None
        if cfg.phi_mode == "time-varying":
            basis_phi = draw_basis(cfg.n_c, cfg.beta_max, rngmod.stream(cfg.seed, rngmod.BASIS, s, 1), "phi")
        prev = Waveform(h_f, h_phi, initial.dt, initial.omega1, None)

        def build(x, s=s, basis_f=basis_f, basis_phi=basis_phi, prev=prev):
            a0_f, cf, a0_phi, cphi, offset = _split(x, cfg, s)
            return compose_pulse(
                prev,
                ChannelExpansion(a0_f, cf, basis_f),
                cfg.scaling,
                cfg.policy,
                cfg.phi_mode,
                superiteration=s,
                phi_expansion=None if basis_phi is None else ChannelExpansion(a0_phi, cphi, basis_phi),
                phi_offset=phi_offset if offset is None else offset,
                base=initial,
                scale_phi=cfg.scale_phi,
            )

        def objective(x):
            pulse = build(x)
            value = landscape.cost(pulse)
            record(pulse, value)
            return value

        starts.append(len(history))
        entry = {"superiteration": s, "f": basis_f.to_dict()}
        if basis_phi is not None:
            entry["phi"] = basis_phi.to_dict()
        bases.append(entry)
        x0, steps = _start_vector(cfg, s, phi_offset)
        n_before = len(history)
        result = nelder_mead_adaptive(
            objective,
            x0,
            steps,
            cfg.n_iter_total - len(history),
            (cfg.convergence_window, cfg.convergence_eps) if cfg.convergence_window else None,
            drift_compensation=drift,
        )
        for i, flag in enumerate(result.reevaluated):
            reevaluated[n_before + i] = flag
        reasons.append(result.stop_reason)
        if result.stop_reason == "budget":
            break
        promoted.append(result.fun)
        a0_f, cf, a0_phi, cphi, offset = _split(result.x, cfg, s)
        h_f = expand_channel(h_f, ChannelExpansion(a0_f, cf, basis_f), t, T, s)
        if basis_phi is not None:
            h_phi = expand_channel(h_phi, ChannelExpansion(a0_phi, cphi, basis_phi), t, T, s)
        if offset is not None:
            phi_offset = float(offset)
        s += 1
        checkpoint = snapshot()

    best_index = int(np.argmin(history))
    best_pulse = pulses[best_index]
    final = ensemble_average(best_pulse, sim, target, purpose=rngmod.REEVALUATION)
    return OptimizationRecord(
        j_history=list(history),
        reevaluated=list(reevaluated),
        superiteration_starts=starts,
        best_pulse=best_pulse,
        best_j=float(history[best_index]),
        best_index=best_index,
        j_opt_mean=final.j_mean,
        j_opt_std=final.j_std,
        bases=bases,
        stop_reasons=reasons,
        promoted_j=promoted,
        config=cfg,
        simulation=sim.to_dict(),
        frozen_index=frozen_index,
        checkpoint=checkpoint,
        candidates_f=cand_f if cfg.keep_candidates else None,
        candidates_phi=cand_phi if cfg.keep_candidates else None,
    )


# --- persistence ---------------------------------------------------------------


def waveform_to_dict(w: Waveform) -> dict:
    return {
        "f": w.f.tolist(),
        "phi": w.phi.tolist(),
        "dt_us": w.dt,
        "omega1_rad_per_us": w.omega1,
        "amplitude_limit_rad_per_us": w.amplitude_limit,
    }


def waveform_from_dict(d: dict) -> Waveform:
    return Waveform(d["f"], d["phi"], d["dt_us"], d["omega1_rad_per_us"], d["amplitude_limit_rad_per_us"])


def record_to_dict(rec: OptimizationRecord) -> dict:
    def num(v):
        # JSON has no infinity; rejected vertices are stored as null
        return None if not math.isfinite(v) else float(v)

    return {
        "budget_unit": rec.budget_unit,
        "config": None if rec.config is None else rec.config.to_dict(),
        "simulation": rec.simulation,
        "j_history": [num(v) for v in rec.j_history],
        "reevaluated": list(map(bool, rec.reevaluated)),
        "superiteration_starts": list(rec.superiteration_starts),
        "bases": rec.bases,
        "stop_reasons": rec.stop_reasons,
        "promoted_j": [num(v) for v in rec.promoted_j],
        "best_j": rec.best_j,
        "best_index": rec.best_index,
        "j_opt_mean": rec.j_opt_mean,
        "j_opt_std": rec.j_opt_std,
        "frozen_index": rec.frozen_index,
        "best_pulse": waveform_to_dict(rec.best_pulse),
        "checkpoint": None if rec.checkpoint is None else rec.checkpoint.to_dict(),
        "candidates_f": rec.candidates_f,
        "candidates_phi": rec.candidates_phi,
    }


def record_from_dict(d: dict) -> OptimizationRecord:
    return OptimizationRecord(
        j_history=[math.inf if v is None else v for v in d["j_history"]],
        reevaluated=d["reevaluated"],
        superiteration_starts=d["superiteration_starts"],
        best_pulse=waveform_from_dict(d["best_pulse"]),
        best_j=d["best_j"],
        best_index=d["best_index"],
        j_opt_mean=d["j_opt_mean"],
        j_opt_std=d["j_opt_std"],
        bases=d.get("bases", []),
        stop_reasons=d.get("stop_reasons", []),
        promoted_j=[math.inf if v is None else v for v in d.get("promoted_j", [])],
        config=None if d.get("config") is None else DcrabConfig.from_dict(d["config"]),
        simulation=d.get("simulation"),
        frozen_index=d.get("frozen_index"),
        checkpoint=None if d.get("checkpoint") is None else _Checkpoint.from_dict(d["checkpoint"]),
        candidates_f=d.get("candidates_f"),
        candidates_phi=d.get("candidates_phi"),
        budget_unit=d.get("budget_unit", "cost-function evaluations"),
    )


def save_record(rec: OptimizationRecord, path) -> None:
    Path(path).write_text(json.dumps(record_to_dict(rec), indent=1))


def load_record(path) -> OptimizationRecord:
    return record_from_dict(json.loads(Path(path).read_text()))

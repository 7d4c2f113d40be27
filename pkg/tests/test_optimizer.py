import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize, rosen

from dcrab_nv.dynamics import EXCITED, SimulationConfig, paper_simulation
from dcrab_nv.optimizer import (
    BudgetError,
    DcrabConfig,
    FreshNoiseLandscape,
    FrozenNoiseLandscape,
    adaptive_coefficients,
    dcrab_optimize,
    evaluate_cost,
    load_record,
    nelder_mead_adaptive,
    record_from_dict,
    record_to_dict,
    save_record,
    select_representative_realization,
)
from dcrab_nv.pulse import initial_guess_pulse, narrow_pulse

SMALL = dict(n_sample=60, n_rep=4)


def test_adaptive_coefficients():
    assert adaptive_coefficients(2) == (1.0, 2.0, 0.5, 0.5)
    a, chi, gamma, sigma = adaptive_coefficients(10)
    assert (chi, gamma, sigma) == pytest.approx((1.2, 0.7, 0.9))
    # the shrink formula degenerates at n = 1
    assert adaptive_coefficients(1)[3] == 0.5


def test_quadratic_in_one_dimension():
    res = nelder_mead_adaptive(lambda x: (x[0] - 3.0) ** 2, [0.0], [1.0], 2000, convergence=None)
    assert abs(res.x[0] - 3.0) < 1e-6
    assert res.n_evaluations <= 2000


def test_rosenbrock_against_reference_implementation():
    res = nelder_mead_adaptive(rosen, [-1.2, 1.0], [0.5, 0.5], 2000, convergence=None)
    assert np.max(np.abs(res.x - 1.0)) < 1e-3
    ref = minimize(rosen, [-1.2, 1.0], method="Nelder-Mead", options={"adaptive": True, "maxfev": 2000})
    assert res.fun <= max(ref.fun, 1e-8) * 10


@given(st.integers(1, 6), st.integers(0, 300))
def test_budget_accounting(n, budget):
    calls = []

    def f(x):
        calls.append(x)
        return float(np.sum((x - 0.3) ** 2))

    res = nelder_mead_adaptive(f, np.zeros(n), np.ones(n), budget, convergence=(20, 1e-3))
    assert len(calls) == res.n_evaluations == len(res.history) <= budget
    assert res.stop_reason in ("budget", "converged", "collapsed")


def test_convergence_window_stops_flat_objective():
    res = nelder_mead_adaptive(lambda x: 1.0, [0.0, 0.0], [1.0, 1.0], 1000, convergence=(100, 1e-3))
    assert res.stop_reason in ("converged", "collapsed")
    assert res.n_evaluations <= 101


def test_non_finite_values_are_rejected():
    def f(x):
        return math.nan if x[0] > 2 else (x[0] - 1) ** 2

    res = nelder_mead_adaptive(f, [0.0], [5.0], 300, convergence=None)
    assert abs(res.x[0] - 1) < 1e-4
    assert math.inf in res.history


def test_drift_compensation_refreshes_incumbent():
    g = np.random.default_rng(0)
    res = nelder_mead_adaptive(
        lambda x: float(np.sum(x**2) + 0.01 * g.standard_normal()), [1.0, 1.0], [0.5, 0.5], 200,
        convergence=None, drift_compensation=True,
    )
    idx = [i for i, r in enumerate(res.reevaluated) if r]
    assert len(idx) > 10
    # refreshed every n + 1 = 3 other evaluations (shrinks can overshoot)
    gaps = np.diff(idx)
    assert np.all(gaps >= 4) and np.median(gaps) <= 6


# --- dCRAB ---------------------------------------------------------------------


def frozen(budget, **kw):
    return DcrabConfig(n_iter_total=budget, landscape_mode="frozen", seed=kw.pop("seed", 3), **kw)


def test_budget_zero_keeps_only_initial_evaluation():
    rec = dcrab_optimize(initial_guess_pulse(), DcrabConfig(n_iter_total=0), paper_simulation(1.0, **SMALL))
    assert rec.n_evaluations == 1
    assert rec.superiteration_starts == []
    assert rec.best_pulse == initial_guess_pulse()


def test_budget_smaller_than_simplex_is_rejected():
    with pytest.raises(BudgetError):
        dcrab_optimize(initial_guess_pulse(), DcrabConfig(n_iter_total=5), paper_simulation(1.0, **SMALL))


def test_config_validation_and_dimensions():
    with pytest.raises(ValueError):
        DcrabConfig(phi_mode="spiral")
    with pytest.raises(ValueError):
        DcrabConfig(landscape_mode="warm")
    assert DcrabConfig(n_c=5).dimension(1) == 5
    assert DcrabConfig(n_c=5).dimension(2) == 6
    assert DcrabConfig(n_c=5, phi_mode="constant").dimension(2) == 7
    assert DcrabConfig(n_c=5, phi_mode="time-varying").dimension(2) == 12
    cfg = DcrabConfig(n_c=7, phi_mode="constant", scaling=None)
    assert DcrabConfig.from_dict(cfg.to_dict()) == cfg


def test_frozen_run_is_deterministic_and_monotone():
    sim = paper_simulation(100.0, **SMALL)
    a = dcrab_optimize(initial_guess_pulse(), frozen(250), sim)
    b = dcrab_optimize(initial_guess_pulse(), frozen(250), sim)
    assert a.j_history == b.j_history
    assert np.all(np.diff(a.running_best) <= 0)
    assert a.best_j < a.initial_j
    # no drift compensation on a deterministic landscape
    assert not any(a.reevaluated)
    land = FrozenNoiseLandscape(sim, select_representative_realization(initial_guess_pulse(), sim).realization)
    assert land.cost(a.best_pulse) == a.best_j


def test_superiteration_boundary_reproduces_promoted_pulse():
    rec = dcrab_optimize(
        initial_guess_pulse(), frozen(600, convergence_window=40, keep_candidates=True), paper_simulation(100.0, **SMALL)
    )
    assert len(rec.superiteration_starts) >= 3
    for s in range(1, len(rec.promoted_j)):
        start = rec.superiteration_starts[s]
        prev = range(rec.superiteration_starts[s - 1], start)
        assert rec.j_history[start] == rec.promoted_j[s - 1]
        match = [k for k in prev if rec.j_history[k] == rec.promoted_j[s - 1]]
        assert any(rec.candidates_f[k] == rec.candidates_f[start] for k in match)


@pytest.mark.parametrize("mode", ["fixed", "constant", "time-varying"])
def test_every_candidate_respects_constraints(mode):
    rec = dcrab_optimize(
        initial_guess_pulse(),
        frozen(160, phi_mode=mode, n_c=3, convergence_window=30, keep_candidates=True),
        paper_simulation(1.0, **SMALL),
    )
    f = np.array(rec.candidates_f)
    assert f.shape == (rec.n_evaluations, 50)
    assert np.max(np.abs(f)) <= 5.0 + 1e-12
    assert len(rec.j_history) == len(rec.reevaluated) == rec.n_evaluations <= 160
    phi = np.array(rec.candidates_phi)
    if mode == "fixed":
        assert np.allclose(phi, math.pi / 2)
    else:
        assert not np.allclose(phi, math.pi / 2)
        if mode == "constant":
            assert np.allclose(phi, phi[:, :1])


def test_noise_free_perfect_pulse_stays_optimal():
    sim = SimulationConfig(n_sample=4, n_rep=3)
    rec = dcrab_optimize(initial_guess_pulse(), frozen(120), sim)
    assert rec.best_j <= 1e-6
    assert rec.best_index == 0
    assert rec.j_opt_mean <= 1e-6


@pytest.mark.parametrize("mode", ["frozen", "fresh"])
def test_resume_continues_deterministically(mode, tmp_path):
    sim = paper_simulation(10.0, **SMALL)
    kw = dict(landscape_mode=mode, seed=9, convergence_window=30)
    full = dcrab_optimize(initial_guess_pulse(), DcrabConfig(n_iter_total=260, **kw), sim)
    part = dcrab_optimize(initial_guess_pulse(), DcrabConfig(n_iter_total=110, **kw), sim)
    save_record(part, tmp_path / "rec.json")
    resumed = dcrab_optimize(
        initial_guess_pulse(), DcrabConfig(n_iter_total=260, **kw), sim, resume=load_record(tmp_path / "rec.json")
    )
    assert resumed.j_history == full.j_history
    assert resumed.superiteration_starts == full.superiteration_starts
    assert resumed.best_j == full.best_j
    assert resumed.j_opt_mean == full.j_opt_mean


def test_record_round_trip_keeps_everything():
    rec = dcrab_optimize(initial_guess_pulse(), frozen(80, convergence_window=20), paper_simulation(1.0, **SMALL))
    back = record_from_dict(record_to_dict(rec))
    assert back.j_history == rec.j_history
    assert np.array_equal(back.best_pulse.f, rec.best_pulse.f)
    assert back.config == rec.config
    assert back.bases == rec.bases
    assert record_to_dict(rec)["budget_unit"] == "cost-function evaluations"


def test_fresh_landscape_changes_noise_per_evaluation():
    sim = paper_simulation(1.0, **SMALL)
    land = FreshNoiseLandscape(sim)
    first, second = land.cost(narrow_pulse()), land.cost(narrow_pulse())
    assert first != second
    assert evaluate_cost(narrow_pulse(), sim) == first


def test_representative_realization():
    sim = paper_simulation(100.0, n_sample=200, n_rep=10)
    choice = select_representative_realization(initial_guess_pulse(), sim)
    assert abs(choice.j_values[choice.index] - choice.j_mean) <= choice.j_std
    single = select_representative_realization(initial_guess_pulse(), paper_simulation(100.0, n_sample=50, n_rep=1))
    assert single.index == 0
    clean = select_representative_realization(initial_guess_pulse(), SimulationConfig(n_sample=5, n_rep=4))
    assert np.allclose(clean.j_values, clean.j_values[0])

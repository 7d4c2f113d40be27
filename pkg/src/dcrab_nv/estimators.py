"""scikit-learn style wrappers around calibration and pulse optimization.

Only ``fit``/``score``/``get_params`` carry meaning here; neither model
transforms a feature matrix.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dynamics import EXCITED, SimulationConfig, ensemble_average
from .noise import CoherenceTimes, calibrate_from_coherence, hahn_coherence, free_coherence
from .optimizer import DcrabConfig, dcrab_optimize
from .pulse import ConstraintPolicy, ScalingSpec, Waveform


class OUCalibrator(BaseEstimator):
    """Fit OU detuning noise ``(sigma_, tau_)`` to a pair of 1/e coherence times.

    ``fit`` takes ``X = (t2_star, t2_he)`` in us, either as a pair or a
    single-row array.
    """

    def fit(self, X, y=None):
        t2_star, t2_he = np.asarray(X, dtype=float).reshape(-1)[:2]
        self.params_ = calibrate_from_coherence(CoherenceTimes(t2_star, t2_he))
        self.sigma_ = self.params_.sigma
        self.tau_ = self.params_.tau
        return self

    def predict(self, t):
        """Ramsey and Hahn-echo coherence at times ``t``, shape ``(len(t), 2)``."""
        check_is_fitted(self, "params_")
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.column_stack([free_coherence(self.params_, t), hahn_coherence(self.params_, t)])


class DcrabOptimizer(BaseEstimator):
    """Optimize a pi pulse against a noise model with dCRAB.

    ``fit(initial_pulse)`` runs the optimization; ``score(pulse)`` returns
    the ensemble-averaged fidelity ``1 - J``.
    """

    def __init__(
        self,
        simulation: Optional[SimulationConfig] = None,
        n_c: int = 5,
        beta_max: float = 3.0,
        phi_mode: str = "fixed",
        n_iter_total: int = 2000,
        convergence_window: int = 100,
        convergence_eps: float = 1e-3,
        amp_variation_f: float = 3.0,
        amp_variation_phi: float = 2 * np.pi,
        landscape_mode: str = "fresh",
        sigma_scale: float = 30.0,
        f_limit: float = 5.0,
        constraint_mode: str = "truncate",
        random_state: int = 0,
    ):
        self.simulation = simulation
        self.n_c = n_c
        self.beta_max = beta_max
        self.phi_mode = phi_mode
        self.n_iter_total = n_iter_total
        self.convergence_window = convergence_window
        self.convergence_eps = convergence_eps
        self.amp_variation_f = amp_variation_f
        self.amp_variation_phi = amp_variation_phi
        self.landscape_mode = landscape_mode
        self.sigma_scale = sigma_scale
        self.f_limit = f_limit
        self.constraint_mode = constraint_mode
        self.random_state = random_state

    def _config(self) -> DcrabConfig:
        return DcrabConfig(
            n_c=self.n_c,
            beta_max=self.beta_max,
            phi_mode=self.phi_mode,
            n_iter_total=self.n_iter_total,
            convergence_window=self.convergence_window,
            convergence_eps=self.convergence_eps,
            amp_variation_f=self.amp_variation_f,
            amp_variation_phi=self.amp_variation_phi,
            landscape_mode=self.landscape_mode,
            seed=self.random_state,
            scaling=ScalingSpec(self.sigma_scale),
            policy=ConstraintPolicy(self.f_limit, self.constraint_mode),
        )

    def _sim(self) -> SimulationConfig:
        return self.simulation if self.simulation is not None else SimulationConfig(seed=self.random_state)

    def fit(self, X: Waveform, y=None):
        if not isinstance(X, Waveform):
            raise TypeError("fit expects the initial Waveform")
        self.record_ = dcrab_optimize(X, self._config(), self._sim())
        self.best_pulse_ = self.record_.best_pulse
        self.n_evaluations_ = self.record_.n_evaluations
        return self

    def predict(self, X=None) -> Waveform:
        check_is_fitted(self, "record_")
        return self.best_pulse_

    def score(self, X: Optional[Waveform] = None, y=None) -> float:
        """Mean fidelity of ``X`` (default: the fitted pulse)."""
        if X is None:
            check_is_fitted(self, "record_")
            X = self.best_pulse_
        return 1.0 - ensemble_average(X, self._sim(), EXCITED).j_mean

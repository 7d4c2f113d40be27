"""Noise-robust pi-pulse design for a driven two-level spin under OU noise."""

__version__ = "0.1.0"

from .noise import OuParams, CoherenceTimes, calibrate_from_coherence, predict_from_tau, calibration_table
from .pulse import Waveform, initial_guess_pulse, narrow_pulse, compose_pulse, align_and_mae
from .dynamics import EXCITED, GROUND, SimulationConfig, paper_simulation, ensemble_average, evolve_sample
from .optimizer import DcrabConfig, OptimizationRecord, dcrab_optimize, nelder_mead_adaptive

__all__ = [
    "OuParams",
    "CoherenceTimes",
    "calibrate_from_coherence",
    "predict_from_tau",
    "calibration_table",
    "Waveform",
    "initial_guess_pulse",
    "narrow_pulse",
    "compose_pulse",
    "align_and_mae",
    "EXCITED",
    "GROUND",
    "SimulationConfig",
    "paper_simulation",
    "ensemble_average",
    "evolve_sample",
    "DcrabConfig",
    "OptimizationRecord",
    "dcrab_optimize",
    "nelder_mead_adaptive",
]

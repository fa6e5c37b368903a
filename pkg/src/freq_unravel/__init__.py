"""Frequency-resolved unraveling of the Lindblad master equation."""

__version__ = "0.1.0"

from .engine import DecayRecord, evolve_ordered_hierarchy, evolve_record, evolve_unordered
from .grid import FrequencyGrid, make_grid, sinc_window
from .model import JumpChannel, ModelSpec, build_effective_hamiltonian, initial_state, preset, two_level_model
from .montecarlo import run_ensemble, run_trial

__all__ = [
    "DecayRecord",
    "FrequencyGrid",
    "JumpChannel",
    "ModelSpec",
    "build_effective_hamiltonian",
    "evolve_ordered_hierarchy",
    "evolve_record",
    "evolve_unordered",
    "initial_state",
    "make_grid",
    "preset",
    "run_ensemble",
    "run_trial",
    "sinc_window",
    "two_level_model",
]

"""Antithetic multilevel Monte Carlo for SDEs driven by a truncated Milstein scheme.

Submodules:

    model     SDE coefficients, payoffs and the h-tensor
    noise     reproducible nested Brownian increments and permutations
    scheme    the step and the coupled coarse / fine / antithetic legs
    mlmc      level planning, the estimator and cost accounting
    limitlaw  noise-array statistics, strong rates, CLT and permutation checks
    cli       command-line entry point
"""

from .mlmc import LevelPlan, MlmcResult, WeightFamily, estimate, plan_levels
from .model import Payoff, SdeModel, get_model, get_payoff, h_tensor
from .noise import FineIncrementGrid, Permutation, StreamKey, sample_grid
from .scheme import coupled_triple, milstein_step, simulate_coarse, simulate_fine

__version__ = "0.1.0"

__all__ = [
    "FineIncrementGrid",
    "LevelPlan",
    "MlmcResult",
    "Payoff",
    "Permutation",
    "SdeModel",
    "StreamKey",
    "WeightFamily",
    "coupled_triple",
    "estimate",
    "get_model",
    "get_payoff",
    "h_tensor",
    "milstein_step",
    "plan_levels",
    "sample_grid",
    "simulate_coarse",
    "simulate_fine",
]

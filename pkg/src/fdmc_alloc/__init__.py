"""Joint power and subcarrier allocation for full-duplex multicarrier cells."""

from .baselines import (
    EnumerationTooLarge,
    PowerGrid,
    brute_force_oracle,
    decoupled_baseline,
    hd_baseline,
)
from .channel import (
    CellGeometry,
    ChannelGains,
    LargeScaleParams,
    ParameterError,
    sample_channel_realization,
    trial_rng,
)
from .engine import ConstraintSystem, SmoothObjective, minimize
from .model import (
    Allocation,
    ProblemInstance,
    check_feasibility,
    subcarrier_utility,
    system_objective,
)
from .reform import LiftedPoint, lift, unlift
from .sca import SolveReport, SolverConfig, round_and_refine, solve

__all__ = [
    "Allocation", "CellGeometry", "ChannelGains", "ConstraintSystem", "EnumerationTooLarge",
    "LargeScaleParams", "LiftedPoint", "ParameterError", "PowerGrid", "ProblemInstance",
    "SmoothObjective", "SolveReport", "SolverConfig", "brute_force_oracle", "check_feasibility",
    "decoupled_baseline", "hd_baseline", "lift", "minimize", "round_and_refine",
    "sample_channel_realization", "solve", "subcarrier_utility", "system_objective",
    "trial_rng", "unlift",
]

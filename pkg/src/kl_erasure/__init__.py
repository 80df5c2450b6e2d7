"""KL-optimal finite-time erasure of a two-state Markov bit.

Internal units use kT = 1 throughout: energies, work and heat are in nats.
"""

from .chain_core import (
    Distribution,
    Generator,
    PassiveRates,
    equilibrium,
    evolve_passive,
    internal_energy_gap,
    reliability_timescale,
)
from .kl_control import (
    ClosedFormOptimal,
    Desirability,
    Grid,
    Passive,
    Protocol,
    cost_to_go,
    erasing_cost,
    evolve_controlled,
    optimal_protocol,
    solve_desirability,
)

__all__ = [
    "ClosedFormOptimal",
    "Desirability",
    "Distribution",
    "Generator",
    "Grid",
    "Passive",
    "PassiveRates",
    "Protocol",
    "cost_to_go",
    "equilibrium",
    "erasing_cost",
    "evolve_controlled",
    "evolve_passive",
    "internal_energy_gap",
    "optimal_protocol",
    "reliability_timescale",
    "solve_desirability",
]

__version__ = "0.1.0"

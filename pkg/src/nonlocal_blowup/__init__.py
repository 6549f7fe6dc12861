"""Lagrangian particle solver and barrier certification for the nonlocal
transport model omega_t + u omega_x = rho/x^beta, rho_t + u rho_x = 0,
u = -x Q, Q(x) = int_x^inf omega(y)/y dy."""

from .barrier import P0, BarrierParams, make_prepared_data, select_params, upper_bound_time, verify_cond_params
from .sequences import S0, BarrierSequences, build_sequences, verify_sequence_conditions
from .simulator import SimConfig, run
from .state import ParticleCloud
from .velocity import compute_Q

__all__ = [
    "P0", "BarrierParams", "make_prepared_data", "select_params", "upper_bound_time", "verify_cond_params",
    "S0", "BarrierSequences", "build_sequences", "verify_sequence_conditions",
    "SimConfig", "run", "ParticleCloud", "compute_Q",
]

"""Linear-quadratic stochastic control under volatility ambiguity.

Submodules: ``problem`` (domain types, validation, config), ``gheat``
(sublinear expectations via a nonlinear heat solve), ``riccati`` (backward
feedback synthesis), ``simulate`` (reproducible Monte Carlo), ``robust``
(worst-case scenario search), ``verify`` (first-order optimality checks),
``cli`` (command-line front door).
"""

__version__ = "0.1.0"

from .problem import (
    AmbiguityBounds,
    FeedbackControl,
    LQProblem,
    PiecewiseConstant,
    VolatilityScenario,
    load_problem,
    problem_hash,
    serialize_problem,
    validate_problem,
)
from .gheat import GHeatGrid, GHeatSolution, compose_conditional, default_grid, g_expectation, g_scalar, solve_g_heat
from .riccati import AdjointPath, RiccatiSolution, adjoint_from_riccati, optimal_feedback, solve_riccati
from .simulate import PathBundle, SimConfig, brownian_increments, cost_under_scenario, k_residual, simulate, verify_value_process
from .robust import RobustResult, ScenarioFamily, example_objective, example_worst_case, robust_cost
from .verify import (
    HamiltonianEval,
    VariationalReport,
    gateaux_check,
    hamiltonian_along,
    hamiltonian_stationarity,
    multiplier_path,
    sufficient_condition_check,
    variational_inequality_check,
)

__all__ = [
    "AmbiguityBounds", "FeedbackControl", "LQProblem", "PiecewiseConstant",
    "VolatilityScenario", "load_problem", "problem_hash", "serialize_problem",
    "validate_problem",
    "GHeatGrid", "GHeatSolution", "compose_conditional", "default_grid",
    "g_expectation", "g_scalar", "solve_g_heat",
    "AdjointPath", "RiccatiSolution", "adjoint_from_riccati", "optimal_feedback",
    "solve_riccati",
    "PathBundle", "SimConfig", "brownian_increments", "cost_under_scenario",
    "k_residual", "simulate", "verify_value_process",
    "RobustResult", "ScenarioFamily", "example_objective", "example_worst_case",
    "robust_cost",
    "HamiltonianEval", "VariationalReport", "gateaux_check", "hamiltonian_along",
    "hamiltonian_stationarity", "multiplier_path", "sufficient_condition_check",
    "variational_inequality_check",
]

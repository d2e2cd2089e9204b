"""Time-synchronization (GPS spoofing) attacks on PMU-based state estimation.

Submodules:

* :mod:`pmuspoof.netcase`: case parsing, admittances, AC power flow
* :mod:`pmuspoof.pmu`: PMU measurement model, attacks, simulation
* :mod:`pmuspoof.estimation`: ML / MAP estimators and attacked-estimator statistics
* :mod:`pmuspoof.vulnerability`: most-vulnerable PMU search
* :mod:`pmuspoof.am`: alternating-minimisation state and attack reconstruction
* :mod:`pmuspoof.scada`: SCADA Gauss-Newton estimation (hybrid prior)
* :mod:`pmuspoof.lnrt`: largest normalized residual test baseline
* :mod:`pmuspoof.experiment`, :mod:`pmuspoof.cli`: Monte-Carlo harness and command line
"""

from .am import AmConfig, AmResult, run_am, run_am_hybrid
from .errors import (
    CaseFormatError,
    ConfigError,
    ConvergenceError,
    DegenerateMeasurementError,
    InternalError,
    NumericalError,
    PmuSpoofError,
    UnobservableError,
)
from .estimation import attacked_stats, bias_vector, estimate_map, estimate_ml
from .experiment import ExperimentConfig, RunSummary, compare_methods, run_experiment
from .fixtures import load_case, load_placement
from .lnrt import normalized_residuals, run_lnrt
from .netcase import NetworkCase, build_admittance, parse_case, solve_power_flow
from .pmu import AttackScenario, MeasurementSet, PmuPlacement, build_pmu_model, simulate_measurements
from .scada import estimate_scada, select_channels, simulate_scada
from .vulnerability import find_vulnerable_greedy, find_vulnerable_optimal

__version__ = "0.1.0"

__all__ = [
    "AmConfig", "AmResult", "run_am", "run_am_hybrid",
    "CaseFormatError", "ConfigError", "ConvergenceError", "DegenerateMeasurementError",
    "InternalError", "NumericalError", "PmuSpoofError", "UnobservableError",
    "attacked_stats", "bias_vector", "estimate_map", "estimate_ml",
    "ExperimentConfig", "RunSummary", "compare_methods", "run_experiment",
    "load_case", "load_placement",
    "normalized_residuals", "run_lnrt",
    "NetworkCase", "build_admittance", "parse_case", "solve_power_flow",
    "AttackScenario", "MeasurementSet", "PmuPlacement", "build_pmu_model", "simulate_measurements",
    "estimate_scada", "select_channels", "simulate_scada",
    "find_vulnerable_greedy", "find_vulnerable_optimal",
]

"""Area-prioritized post-contingency setpoint dispatch for multi-area grids with IBRs."""

from .cases import build_reference_case
from .coordinator import AreaCoordinator, CoordinationLayer, CoordinatorConfig, PerfectEstimator
from .dynamics import DynamicsConfig, SimulationAbort, Simulator, Trajectory, run_scenario
from .frequency import (ActiveImbalanceDetector, detect_active_imbalance, primary_dispatch_all,
                        primary_dispatch_first_hierarchy, primary_dispatch_higher_hierarchy, run_appf)
from .grid import (Network, assign_hierarchies, build_admittance, compute_headroom, load_network,
                   save_network)
from .powerflow import PowerFlowDivergence, PowerFlowSolution, solve_regular_power_flow
from .scenarios import ConfigError, ScenarioConfig, compare_rpf_appf, run_case, run_mode
from .stage import StageInfeasible, StageNonConvergence, StageSpec, solve_constrained_stage
from .voltage import (compute_sensitivity, detect_reactive_imbalance, rank_and_classify,
                      sequential_voltage_optimization)

__version__ = "0.1.0"

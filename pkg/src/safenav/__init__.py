"""Safety-filtered navigation: dynamics, policies, verification, CBF filter, NMPC, simulation."""

from .cbf import BarrierContext, FilterDiagnostics, LinearConstraint, QPInfeasible, filter_action, solve_qp, solve_qp_multi
from .dynamics import BoatParams, BoatState, ReferenceCommand, ThrustCommand, UnicycleState
from .nmpc import NMPCConfig, NMPCController, nmpc_solve
from .policy import ObservationVector, PolicyNetwork, ScriptedPolicy, build_observation, forward, load_network
from .simulator import DisturbanceConfig, EpisodeResult, StackConfig, evaluate, run_episode, step
from .verification import (EnumerationConfig, EnumerationResult, IntervalBox, OutputProperty, SafeSet,
                           enumerate_unsafe, interval_forward)
from .world import World, generate_world

__version__ = "0.1.0"

__all__ = [
    "BarrierContext", "FilterDiagnostics", "LinearConstraint", "QPInfeasible", "filter_action", "solve_qp",
    "solve_qp_multi", "BoatParams", "BoatState", "ReferenceCommand", "ThrustCommand", "UnicycleState",
    "NMPCConfig", "NMPCController", "nmpc_solve", "ObservationVector", "PolicyNetwork", "ScriptedPolicy",
    "build_observation", "forward", "load_network", "DisturbanceConfig", "EpisodeResult", "StackConfig",
    "evaluate", "run_episode", "step", "EnumerationConfig", "EnumerationResult", "IntervalBox",
    "OutputProperty", "SafeSet", "enumerate_unsafe", "interval_forward", "World", "generate_world",
]

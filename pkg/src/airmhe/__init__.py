"""
Moving horizon estimation residual generator for angle-of-attack and
calibrated-airspeed sensor fault detection and isolation in wind.
"""

from .airmodel import FlightParams, output_h, step_F, jacobians
from .errors import AirMheError
from .fdi import ClosedLoop, LoopConfig, Thresholds, calibrate_thresholds, run_closed_loop
from .mhe import Bounds, MovingHorizonEstimator, SolverOptions, Weights, solve
from .simulator import FaultSpec, ScenarioConfig, build_scenario, scenario_from_dict

__version__ = "0.1.0"

__all__ = [
    "FlightParams", "output_h", "step_F", "jacobians", "AirMheError",
    "ClosedLoop", "LoopConfig", "Thresholds", "calibrate_thresholds", "run_closed_loop",
    "Bounds", "MovingHorizonEstimator", "SolverOptions", "Weights", "solve",
    "FaultSpec", "ScenarioConfig", "build_scenario", "scenario_from_dict",
]

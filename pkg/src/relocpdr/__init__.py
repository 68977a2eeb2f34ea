"""Inertial dead reckoning aided by map-based visual relocalization.

Modules: ``core`` (shared types), ``pdr`` (step detection, step length,
heading), ``relocalizer`` (retrieval, matching, PnP-RANSAC), ``fusion``
(robust incremental pose graph), ``simulator`` (synthetic walks, IMU, maps)
and ``cli``.
"""

from .core import FeatureMapDB, MetricsReport, Position2, RelocObservation, StepEvent
from .fusion import FusionConfig, FusionGraph
from .pdr import PdrConfig, run_pdr
from .relocalizer import RelocConfig, relocalize
from .simulator import ScenarioConfig, load_scenario, simulate

__version__ = "0.1.0"

__all__ = [
    "FeatureMapDB", "MetricsReport", "Position2", "RelocObservation", "StepEvent",
    "FusionConfig", "FusionGraph", "PdrConfig", "run_pdr", "RelocConfig", "relocalize",
    "ScenarioConfig", "load_scenario", "simulate",
]

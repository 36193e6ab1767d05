"""
Feeder microgrid energy management and closed-loop restoration simulator.
"""

__version__ = "0.3.0"

from feeder_microgrid.exceptions import (
    FeederMicrogridError,
    InfeasibleModelError,
    ModelError,
    ReportError,
    ScenarioError,
    SolverError,
)

__all__ = [
    "__version__",
    "FeederMicrogridError",
    "InfeasibleModelError",
    "ModelError",
    "ReportError",
    "ScenarioError",
    "SolverError",
]

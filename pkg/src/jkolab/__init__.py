"""JKO minimizing movements for the heat equation on the flat torus, with Harnack checks."""

from .errors import JkoLabError
from .jko import InnerSettings, JkoConfig, JkoTrajectory, initial_density, jko_step, run_trajectory
from .reference import heat_solve, l1_distance
from .torus import DensityField, GridField, TorusGrid

__all__ = [
    "JkoLabError",
    "InnerSettings",
    "JkoConfig",
    "JkoTrajectory",
    "initial_density",
    "jko_step",
    "run_trajectory",
    "heat_solve",
    "l1_distance",
    "DensityField",
    "GridField",
    "TorusGrid",
]

__version__ = "0.1.0"

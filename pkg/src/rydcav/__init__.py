"""Open-system simulations of Rydberg atoms coupled to a thermal microwave resonator."""

__version__ = "0.1.0"

from .errors import ConfigError, ConvergenceError, DimensionCapError, RydcavError, SingularSystemError
from .model import SystemSpec, build, build_model, build_multiatom, mhz, nbar_thermal, to_mhz
from .operators import DensityMatrix, HilbertDims, Operator
from .solver import mesolve, steadystate

__all__ = [
    "ConfigError",
    "ConvergenceError",
    "DensityMatrix",
    "DimensionCapError",
    "HilbertDims",
    "Operator",
    "RydcavError",
    "SingularSystemError",
    "SystemSpec",
    "build",
    "build_model",
    "build_multiatom",
    "mesolve",
    "mhz",
    "nbar_thermal",
    "steadystate",
    "to_mhz",
]

"""All-in-one frame restoration with a prompt-conditioned U-Net and a Hamiltonian-style flow.

Everything runs on the small float64 autodiff engine in :mod:`flowrestore.tensor`.
"""

from .errors import ConfigError, FlowRestoreError, FormatError, GraphError, NumericalError, ShapeError
from .flow import FieldToggles, SolverSettings, restore_frame
from .nn import ArchConfig, init_params
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "ConfigError",
    "FieldToggles",
    "FlowRestoreError",
    "FormatError",
    "GraphError",
    "NumericalError",
    "ShapeError",
    "SolverSettings",
    "Tensor",
    "init_params",
    "restore_frame",
]

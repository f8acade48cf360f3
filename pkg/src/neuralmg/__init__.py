"""Multigrid transfer operators from mesh intersection or from a neural network."""

from .errors import (
    CorruptModelError,
    DegenerateMeshError,
    InvalidArgumentError,
    InvalidMassError,
    InvalidMatrixError,
    MissingModelError,
    NeuralMGError,
    OutOfRangeError,
    ParseError,
    SolverFailure,
    TrainingFailure,
    UnsupportedExtensionError,
    WrongFamilyError,
)
from .estimators import CouplingRegressor
from .multigrid import (
    Hierarchy,
    Level,
    SmootherConfig,
    build_hierarchy_neural,
    build_hierarchy_sgmg,
    solve,
    two_grid_step,
    vcycle,
)

__version__ = "0.1.0"

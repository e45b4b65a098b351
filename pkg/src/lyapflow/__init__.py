"""Lyapunov-stable graph neural flows on a small numpy autodiff core."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    BudgetError, CheckpointError, ConfigError, ContractError, DimensionError, IngestionError,
    InvariantViolation, LyapflowError, NonFiniteError, RangeError, SolverDivergence, TrainingDivergence,
)

__all__ = [
    "BudgetError", "CheckpointError", "ConfigError", "ContractError", "DimensionError", "IngestionError",
    "InvariantViolation", "LyapflowError", "NonFiniteError", "RangeError", "SolverDivergence", "TrainingDivergence",
]

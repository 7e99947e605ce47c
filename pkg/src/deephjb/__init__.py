"""Physics-informed solvers for stochastic optimal control via the pathwise HJB residual."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    CheckpointError,
    ConditioningError,
    ConfigError,
    DeepHJBError,
    NumericError,
    RolloutDivergence,
    ShapeError,
)
from .problems import BUILTINS, ProblemSpec, get_builtin  # noqa: E402
from .training import TrainConfig, TrainReport, train  # noqa: E402

__all__ = [
    "__version__",
    "BUILTINS",
    "CheckpointError",
    "ConditioningError",
    "ConfigError",
    "DeepHJBError",
    "NumericError",
    "ProblemSpec",
    "RolloutDivergence",
    "ShapeError",
    "TrainConfig",
    "TrainReport",
    "get_builtin",
    "train",
]

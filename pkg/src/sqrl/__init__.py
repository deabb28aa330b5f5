"""Safe RL toolkit: failure-probability critics, masked policies, an
entropy-regularized actor-critic, and an exact tabular oracle for the masking
safety bound."""

__version__ = "0.1.0"

from .config import ExperimentConfig
from .core import ReplayBuffer, RngStream, TabularTask, Trajectory, Transition, rollout

__all__ = [
    "ExperimentConfig",
    "ReplayBuffer",
    "RngStream",
    "TabularTask",
    "Trajectory",
    "Transition",
    "rollout",
    "__version__",
]

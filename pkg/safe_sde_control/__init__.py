"""
Safe SDE Control - neural controllers for stochastic systems that keep the state
in a safe set and drive it to the origin exponentially fast.

This package provides:
- Controller, potential and class-K networks through the nets module
- Training of the stability and safety losses through train()
- Closed-form safety and stability projections through ProjectedController
- Seeded Euler-Maruyama rollouts and metrics through run_rollouts()
- Configuration and validation through ConfigurationManager and ValidationEngine

Example usage:
    from safe_sde_control import TrainConfig, train, compose_safe_stable
    result = train(TrainConfig(system="gbm", seed=1))
"""

from .core.config_manager import ConfigurationManager
from .core.dynamics import make_system
from .core.projection import ProjectedController, compose_safe_stable
from .core.simulate import euler_maruyama, run_rollouts
from .core.training import TrainConfig, train
from .core.validation_engine import ValidationEngine
from .main import main, run_app

__version__ = "0.1.0"
__all__ = [
    "run_app", "main", "ConfigurationManager", "ValidationEngine", "make_system",
    "TrainConfig", "train", "ProjectedController", "compose_safe_stable",
    "euler_maruyama", "run_rollouts",
]

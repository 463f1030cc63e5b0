"""
Core functionality for safe and stable control of stochastic systems.

This module contains:
- autodiff / generator: gradients, traces and the infinitesimal generator
- nets: controller, potential and class-K networks with serialization
- dynamics: the controlled SDE models and their safe regions
- projection, training, simulate, kernel: the control pipeline
- ConfigurationManager / ValidationEngine: run configuration handling
"""

from .config_manager import ConfigurationManager
from .validation_engine import ValidationEngine

__all__ = ["ConfigurationManager", "ValidationEngine"]

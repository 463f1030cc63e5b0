"""
Validation engine for run configurations
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Set

import numpy as np

from .config_manager import ConfigurationManager
from .dynamics import SYSTEMS, make_system
from .generator import TraceModeError, parse_trace_mode
from .precision_handler import PrecisionHandler, values_equal

logger = logging.getLogger(__name__)

COMMANDS = ("train", "project-check", "simulate", "bench")
SEEDED_COMMANDS = ("train", "simulate", "bench")
LARGE_DT = 1e-2
MAX_STEPS = 10 ** 7


@dataclass
class ValidationResult:
    """Detailed validation result"""

    is_valid: bool
    errors: List[str]
    warnings: List[str]
    affected_parameters: Set[str]
    suggestions: List[str] = field(default_factory=list)

    def first_field(self) -> Optional[str]:
        return sorted(self.affected_parameters)[0] if self.affected_parameters else None


class ValidationEngine:
    """Validation with messages that name the failing field"""

    def __init__(self):
        self.critical_errors = []
        self.warnings = []
        self.affected_params = set()

    def validate_complete(self, config: Dict[str, Any], command: Optional[str] = None,
                          raw: Optional[Dict[str, Any]] = None) -> ValidationResult:
        """
        Complete validation of a resolved configuration.

        Args:
            config: resolved configuration (defaults, preset and user keys)
            command: subcommand the config is for; enables mandatory-key checks
            raw: the user's own keys, checked for unknown entries
        """
        self.critical_errors = []
        self.warnings = []
        self.affected_params = set()

        if command is not None and command not in COMMANDS:
            self._error("command", f"command: unknown command '{command}'")
        self._validate_unknown_keys(raw if raw is not None else config)
        self._validate_required(config, command)
        self._validate_basic_ranges(config)
        dim, noise_dim = self._validate_system(config)
        if dim is not None:
            self._validate_structure(config, dim, noise_dim, command)
        self._validate_numerics(config)

        suggestions = self._generate_fix_suggestions(config) if self.critical_errors else []
        return ValidationResult(
            is_valid=len(self.critical_errors) == 0,
            errors=self.critical_errors,
            warnings=self.warnings,
            affected_parameters=self.affected_params,
            suggestions=suggestions,
        )

    def _error(self, name: str, message: str):
        self.critical_errors.append(message)
        self.affected_params.add(name)

    def _validate_unknown_keys(self, config: Dict):
        known = set(ConfigurationManager.known_keys())
        for key in sorted(config):
            if key not in known:
                self._error(key, f"{key}: unknown configuration key")

    def _validate_required(self, config: Dict, command: Optional[str]):
        if config.get("system") is None:
            self._error("system", "system: required; valid systems are " + ", ".join(sorted(SYSTEMS)))
        if command in SEEDED_COMMANDS and config.get("seed") is None:
            self._error("seed", f"seed: required for {command}")

    def _validate_basic_ranges(self, config: Dict):
        """Validate all numeric parameters are within defined ranges"""
        for name, param in ConfigurationManager.PARAMETERS.items():
            value = config.get(name)
            if value is None:
                continue
            display = ConfigurationManager.get_parameter_display(name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                self._error(name, f"{display}: expected a number, got {value!r}")
                continue
            if param.integer and not float(value).is_integer():
                self._error(name, f"{display}: expected an integer, got {value}")
                continue
            if value < param.min_value and not values_equal(value, param.min_value):
                self._error(name, f"{display}: value {value} below minimum {param.min_value}")
            elif value > param.max_value and not values_equal(value, param.max_value):
                self._error(name, f"{display}: value {value} above maximum {param.max_value}")

    def _validate_system(self, config: Dict):
        system = config.get("system")
        if system is None:
            return None, None
        if system not in SYSTEMS:
            self._error("system", f"system: unknown system '{system}'; valid systems are "
                        + ", ".join(sorted(SYSTEMS)))
            return None, None
        params = config.get("system_params") or {}
        if not isinstance(params, dict):
            self._error("system_params", "system_params: expected an object")
            return None, None
        try:
            model, _ = make_system(system, params)
        except ValueError as e:
            self._error("system_params", f"system_params: {e}")
            return None, None
        return model.dim, model.noise_dim

    def _validate_widths(self, config: Dict, name: str, first: int, last: int):
        widths = config.get(name)
        if widths is None:
            return
        if not isinstance(widths, list) or len(widths) < 2 or not all(
            isinstance(w, int) and not isinstance(w, bool) and w >= 1 for w in widths
        ):
            self._error(name, f"{name}: expected a list of at least two positive integers")
            return
        if widths[0] != first or widths[-1] != last:
            self._error(name, f"{name}: must start with {first} and end with {last}, got {widths}")

    def _validate_structure(self, config: Dict, dim: int, noise_dim: int, command: Optional[str]):
        self._validate_widths(config, "controller_widths", dim, dim)
        self._validate_widths(config, "potential_widths", dim, 1)
        self._validate_widths(config, "classk_widths", 1, 1)

        mask = config.get("control_mask")
        if mask is not None and (not isinstance(mask, list) or len(mask) != dim
                                 or not all(isinstance(m, bool) for m in mask)):
            self._error("control_mask", f"control_mask: expected {dim} booleans")

        weight = config.get("control_weight")
        if weight is not None:
            self._validate_control_weight(weight, dim)

        for key in ("train_trace_mode", "project_trace_mode"):
            text = config.get(key)
            if text is None:
                continue
            try:
                mode = parse_trace_mode(text)
                mode.check(noise_dim)
            except TraceModeError as e:
                self._error(key, f"{key}: {e}")
                continue
            if key == "project_trace_mode" and mode.kind == "hutchinson":
                self._error(key, f"{key}: a Hutchinson estimate cannot certify a projection; use exact or vector")

        x0 = config.get("x0")
        if x0 != "sample" and not self._valid_x0(x0, dim):
            self._error("x0", f"x0: expected \"sample\", a {dim}-vector or a list of {dim}-vectors")

        base = config.get("base_controller")
        if base is not None:
            allowed = ConfigurationManager.BASE_CONTROLLERS.get(command) if command else None
            if allowed is None:
                allowed = ConfigurationManager.BASE_CONTROLLERS["simulate"]
            if base not in allowed:
                self._error("base_controller", f"base_controller: '{base}' not one of {', '.join(allowed)}")

        samples_csv = config.get("kernel_samples_csv")
        if samples_csv is not None and not (isinstance(samples_csv, str) and os.path.isfile(samples_csv)):
            self._error("kernel_samples_csv", f"kernel_samples_csv: no such file {samples_csv!r}")

        source = config.get("potential_source")
        if source not in ConfigurationManager.POTENTIAL_SOURCES:
            self._error("potential_source", f"potential_source: '{source}' not one of "
                        + ", ".join(ConfigurationManager.POTENTIAL_SOURCES))

    def _validate_control_weight(self, weight, dim: int):
        shaped = isinstance(weight, list) and len(weight) == dim and all(
            isinstance(row, list) and len(row) == dim
            and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in row)
            for row in weight
        )
        if not shaped:
            self._error("control_weight", f"control_weight: expected a {dim}x{dim} matrix of numbers")
            return
        matrix = np.asarray(weight, dtype=np.float64)
        if not np.all(np.isfinite(matrix)) or not np.allclose(matrix, matrix.T):
            self._error("control_weight", "control_weight: must be a finite symmetric matrix")
            return
        smallest = float(np.linalg.eigvalsh(matrix).min())
        if smallest < -1e-12:
            self._error("control_weight",
                        f"control_weight: must be positive semidefinite, smallest eigenvalue {smallest:.3g}")

    @staticmethod
    def _valid_x0(x0, dim: int) -> bool:
        def is_vector(v):
            return isinstance(v, list) and len(v) == dim and all(
                isinstance(c, (int, float)) and not isinstance(c, bool) for c in v
            )

        if is_vector(x0):
            return True
        return isinstance(x0, list) and len(x0) > 0 and all(is_vector(v) for v in x0)

    def _validate_numerics(self, config: Dict):
        dt, horizon = config.get("dt"), config.get("horizon")
        if isinstance(dt, (int, float)) and dt > LARGE_DT:
            self.warnings.append(
                f"{ConfigurationManager.get_parameter_display('dt')}: {dt} s is coarse; "
                "discrete steps may cross the safe-region boundary"
            )
        if isinstance(dt, (int, float)) and isinstance(horizon, (int, float)) and dt > 0:
            if horizon / dt > MAX_STEPS:
                self._error("horizon", f"horizon: {horizon / dt:.0f} steps exceed the limit of {MAX_STEPS}")

    def _generate_fix_suggestions(self, config: Dict) -> List[str]:
        """Suggest an in-range value for every out-of-range numeric field"""
        suggestions = []
        for name in sorted(self.affected_params):
            param = ConfigurationManager.PARAMETERS.get(name)
            value = config.get(name)
            if param is None or not isinstance(value, (int, float)) or isinstance(value, bool):
                continue
            if value < param.min_value:
                target = param.min_value
            elif value > param.max_value:
                target = param.max_value
            else:
                continue
            shown = int(target) if param.integer else PrecisionHandler.round_value(target, 12)
            suggestions.append(f"Set {ConfigurationManager.get_parameter_display(name)} → {shown}")
        if "seed" in self.affected_params and config.get("seed") is None:
            suggestions.append(f"Set {ConfigurationManager.get_parameter_display('seed')} → 0 (or pass --seed)")
        return suggestions

"""
Configuration management module - parameter definitions, per-system presets,
config resolution and digests
"""

import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from datetime import datetime
from typing import Any, Dict, List, Optional

logger = logging.getLogger(__name__)

CONFIG_VERSION = "1.0"
OUTPUT_DIR_ENV = "SAFE_SDE_CONTROL_OUT"


class ConfigurationError(ValueError):
    """Invalid run configuration; ``result`` holds the ValidationResult when available"""

    def __init__(self, message: str, result=None, field: Optional[str] = None):
        super().__init__(message)
        self.result = result
        self.field = field


@dataclass
class ParameterDefinition:
    """Definition for a single numeric parameter"""

    name: str
    display_name: str
    ui_number: int
    unit: str
    min_value: float
    max_value: float
    default_value: Optional[float]
    tooltip: str
    category: str
    integer: bool = False


def _param(name, display, number, unit, low, high, default, tooltip, category, integer=False):
    return ParameterDefinition(name, display, number, unit, low, high, default, tooltip, category, integer)


class ConfigurationManager:
    """Central configuration management"""

    # PARAMETER DEFINITIONS - Single source of truth for numeric keys
    PARAMETERS = {
        p.name: p
        for p in [
            _param("seed", "Seed", 1, "", 0, 2 ** 31 - 1, None,
                   "Random seed; mandatory for train, simulate and bench", "System", integer=True),
            _param("batch_size", "Batch Size", 2, "", 1, 100000, 500,
                   "States sampled from the safe region per iteration", "Training", integer=True),
            _param("iterations", "Iterations", 3, "", 0, 100000, 300,
                   "Optimizer steps", "Training", integer=True),
            _param("learning_rate", "Learning Rate", 4, "", 1e-6, 10.0, 0.1,
                   "Adam step size", "Training"),
            _param("lambda1", "Stability Weight", 5, "", 1e-6, 100.0, 0.5,
                   "Weight of the stability penalty in L_es", "Training"),
            _param("lambda2", "Safety Weight", 6, "", 1e-6, 100.0, 0.5,
                   "Weight of the safety penalty in L_sf", "Training"),
            _param("stability_rate", "Stability Rate", 7, "1/s", -100.0, -1e-9, -0.1,
                   "Exponential rate c < 0 in 𝓛V <= cV", "Training"),
            _param("epsilon", "Potential Floor", 8, "", 1e-9, 1.0, 1e-3,
                   "ε in V(x) >= ε‖x‖^p", "Networks"),
            _param("exponent", "Floor Exponent", 9, "", 0.5, 8.0, 2.0,
                   "p in V(x) >= ε‖x‖^p", "Networks"),
            _param("spectral_iterations", "Power Iterations", 10, "", 1, 1000, 1,
                   "Power-iteration steps per spectral normalization", "Networks", integer=True),
            _param("log_every", "Log Interval", 11, "", 0, 1000000, 50,
                   "Iterations between progress log lines (0 disables)", "Training", integer=True),
            _param("n_points", "Check Points", 12, "", 1, 1000000, 10000,
                   "States sampled by project-check", "Projection", integer=True),
            _param("degeneracy_tolerance", "Degeneracy Tolerance", 13, "", 1e-18, 1e-3, 1e-12,
                   "Gradients with ‖∇‖² below this leave the control unchanged", "Projection"),
            _param("dt", "Time Step", 14, "s", 1e-6, 1.0, 1e-3,
                   "Euler-Maruyama step", "Simulation"),
            _param("horizon", "Horizon", 15, "s", 0.0, 1000.0, 20.0,
                   "Rollout length T", "Simulation"),
            _param("n_traj", "Trajectories", 16, "", 0, 100000, 10,
                   "Number of seeded rollouts", "Simulation", integer=True),
            _param("kernel_samples", "Kernel Samples", 17, "", 1, 1000000, 10000,
                   "Paired samples of the kernel controller", "Kernel", integer=True),
            _param("kernel_bandwidth", "Kernel Bandwidth", 18, "", 1e-9, 1e6, 1e-3,
                   "Gaussian kernel bandwidth h", "Kernel"),
            _param("flow_horizon", "Flow Horizon", 19, "s", 1e-6, 1e4, 20.0,
                   "Simulation time mapped to flow time 0.99", "Kernel"),
        ]
    }

    # Non-numeric keys and their defaults (None means derived at run time)
    STRUCTURED_KEYS = {
        "system": None,
        "train_trace_mode": None,
        "project_trace_mode": None,
        "controller_widths": None,
        "potential_widths": None,
        "classk_widths": [1, 10, 10, 1],
        "control_mask": None,
        "control_weight": None,
        "x0": "sample",
        "base_controller": None,
        "potential_source": "learned",
        "kernel_samples_csv": None,
        "system_params": {},
        "out_dir": None,
    }

    BASE_CONTROLLERS = {
        "project-check": ("neural", "zero", "kernel"),
        "simulate": ("neural", "projected", "zero", "kernel", "kernel_projected"),
    }
    POTENTIAL_SOURCES = ("learned", "quadratic", "barrier")

    # VALIDATED PRESET CONFIGURATIONS (per system)
    PRESETS = {
        "gbm": {
            "system_params": {"a": -1.0, "b": 1.0},
            "stability_rate": -0.1,
            "learning_rate": 0.1,
            "iterations": 300,
            "x0": [1.0],
            "n_traj": 20,
        },
        "double_pendulum": {
            "stability_rate": -0.1,
            "learning_rate": 0.1,
            "iterations": 300,
            "controller_widths": [4, 12, 12, 4],
            "potential_widths": [4, 12, 12, 1],
        },
        "bicycle": {
            "stability_rate": -0.5,
            "learning_rate": 0.05,
            "iterations": 500,
            "controller_widths": [4, 12, 12, 4],
            "potential_widths": [4, 12, 12, 1],
        },
        "fhn": {
            "system_params": {"n": 50, "k": 4, "p": 0.1, "seed": 0},
            "stability_rate": -0.1,
            "learning_rate": 0.1,
            "iterations": 300,
            "controller_widths": [100, 200, 200, 100],
            "potential_widths": [100, 100, 100, 1],
        },
        "three_link": {
            "stability_rate": -0.1,
            "learning_rate": 0.1,
            "iterations": 300,
            "controller_widths": [6, 18, 18, 6],
            "potential_widths": [6, 12, 12, 1],
            "control_mask": [False, False, False, True, True, True],
        },
    }

    # Seeds of the reference experiments, first one used by bench
    BENCH_SEEDS = {
        "gbm": [1, 2, 3, 4, 5],
        "double_pendulum": [1, 4, 6, 8, 9],
        "bicycle": [3, 5, 6, 9, 10],
        "fhn": [1, 4, 5, 9, 15],
        "three_link": [1, 2, 3, 4, 5],
    }

    @classmethod
    def get_parameter_display(cls, param_name: str) -> str:
        """Display name with its number, e.g. "[7] Stability Rate (stability_rate)" """
        param = cls.PARAMETERS.get(param_name)
        if param:
            return f"[{param.ui_number}] {param.display_name} ({param_name})"
        return param_name

    @classmethod
    def known_keys(cls) -> List[str]:
        return sorted(set(cls.PARAMETERS) | set(cls.STRUCTURED_KEYS))

    @classmethod
    def defaults(cls) -> Dict[str, Any]:
        config = {name: p.default_value for name, p in cls.PARAMETERS.items()}
        config.update(copy.deepcopy(cls.STRUCTURED_KEYS))
        return config

    @classmethod
    def resolve_config(cls, raw: Dict[str, Any], system: Optional[str] = None) -> Dict[str, Any]:
        """
        Defaults, then the system preset, then user keys.

        Unknown systems resolve to defaults plus user keys; validation reports them.
        """
        system = raw.get("system", system)
        config = cls.defaults()
        config.update(copy.deepcopy(cls.PRESETS.get(system, {})))
        for key, value in raw.items():
            if key == "system_params" and isinstance(value, dict):
                merged = dict(config.get("system_params") or {})
                merged.update(value)
                config[key] = merged
            else:
                config[key] = copy.deepcopy(value)
        config["system"] = system
        return config

    @staticmethod
    def config_digest(config: Dict[str, Any]) -> str:
        """SHA-256 of the canonical JSON of a resolved configuration"""
        canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @classmethod
    def default_output_dir(cls) -> str:
        return os.environ.get(OUTPUT_DIR_ENV, "out")

    @classmethod
    def _envelope(cls, config: Dict, **metadata) -> Dict:
        from .validation_engine import ValidationEngine

        result = ValidationEngine().validate_complete(config)
        return {
            "version": CONFIG_VERSION,
            "parameters": config,
            "metadata": {
                "created": str(datetime.now()),
                "validated": result.is_valid,
                "digest": cls.config_digest(config),
                **metadata,
            },
        }

    @classmethod
    def export_config(cls, config: Dict, filepath: str) -> bool:
        """Export configuration with metadata"""
        try:
            with open(filepath, "w") as f:
                json.dump(cls._envelope(config), f, indent=4)
            return True
        except (OSError, TypeError) as e:
            logger.error("Export failed: %s", e)
            return False

    @classmethod
    def auto_save_config(cls, config: Dict, target_dir: str) -> Optional[str]:
        """
        Save the resolved configuration next to the run outputs.

        Creates:
        - target_dir/config.json (latest configuration)
        - target_dir/_autosave/config_YYYYMMDD_HHMMSS.json (timestamped history)

        Returns:
            Path of config.json, or None when saving failed
        """
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        autosave_dir = os.path.join(target_dir, "_autosave")
        try:
            os.makedirs(autosave_dir, exist_ok=True)
        except OSError as e:
            logger.error("Failed to create _autosave directory: %s", e)
            return None

        timestamped_filepath = os.path.join(autosave_dir, f"config_{timestamp}.json")
        latest_filepath = os.path.join(target_dir, "config.json")
        export_data = cls._envelope(config, auto_saved=True, run_timestamp=timestamp)
        try:
            for path in (timestamped_filepath, latest_filepath):
                with open(path, "w") as f:
                    json.dump(export_data, f, indent=4)
        except (OSError, TypeError) as e:
            logger.error("Auto-save failed: %s", e)
            return None
        logger.info("Configuration saved to %s", latest_filepath)
        return latest_filepath

    @classmethod
    def import_config(cls, filepath: str) -> Dict:
        """
        Read a configuration file: an exported envelope or a bare parameter object.

        Raises:
            ConfigurationError: unreadable file or malformed JSON
        """
        try:
            with open(filepath, "r") as f:
                data = json.load(f)
        except OSError as e:
            raise ConfigurationError(f"config: cannot read {filepath}: {e}", field="config") from e
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config: {filepath} is not valid JSON: {e}", field="config") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"config: {filepath} must hold a JSON object", field="config")
        if "parameters" in data and isinstance(data["parameters"], dict):
            return data["parameters"]
        return data

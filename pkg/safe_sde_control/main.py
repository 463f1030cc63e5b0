"""
Command-line entry point: train, project-check, simulate and bench.

Exit codes:
    0  success
    1  environment check failed (run-safe-sde-control only)
    2  configuration error
    3  non-finite training loss
    4  model file or shape mismatch
    5  more than half of the rollouts diverged (outputs are kept) or a mass matrix turned singular
"""

import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .core.autodiff import DimensionMismatchError, GradientReport, gradient_report
from .core.config_manager import ConfigurationError, ConfigurationManager
from .core.dynamics import SingularMassMatrixError, UnknownSystemError, make_system, success_criterion
from .core.generator import TraceModeError
from .core.kernel import build_kernel_controller, load_samples_csv, wrap_with_projection
from .core.nets import ModelFormatError, load_model, save_model
from .core.precision_handler import format_display
from .core.projection import (
    BarrierPotentialError,
    ProjectedController,
    QuadraticPotential,
    potential_from_barrier,
)
from .core.simulate import aggregate_metrics, evaluate_trajectory, run_rollouts, sample_initial_states
from .core.training import NonFiniteLossError, TrainConfig, loss_trend, train, write_history_csv
from .core.validation_engine import ValidationEngine

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ENVIRONMENT = 1
EXIT_CONFIG = 2
EXIT_NON_FINITE = 3
EXIT_MODEL = 4
EXIT_DIVERGED = 5
DIVERGENCE_LIMIT = 0.5

MODEL_FILES = {"controller": "controller.json", "potential": "potential.json", "classk": "classk.json"}
PROJECTED_BASES = ("projected", "kernel_projected")


def check_environment() -> List[str]:
    """Check that the numerical stack supports float64 double backward"""
    errors = []
    try:
        import numpy
        import networkx

        logger.debug("numpy %s, networkx %s, torch %s", numpy.__version__, networkx.__version__, torch.__version__)
    except ImportError as e:
        errors.append(f"Missing dependency: {e}")

    try:
        x = torch.tensor([1.5], dtype=torch.float64, requires_grad=True)
        (grad,) = torch.autograd.grad((x ** 3).sum(), x, create_graph=True)
        (second,) = torch.autograd.grad(grad.sum(), x)
        if abs(float(second) - 9.0) > 1e-12:
            errors.append(f"torch double backward returned {float(second)}, expected 9.0")
    except RuntimeError as e:
        errors.append(f"torch double backward failed: {e}")

    if not hasattr(torch.linalg, "cholesky_ex"):
        errors.append(f"torch {torch.__version__} lacks torch.linalg.cholesky_ex; install torch >= 1.9")

    if errors:
        print("❌ ENVIRONMENT CHECK FAILED")
        print("The following issues were detected:")
        for error in errors:
            print(f"  - {error}")
        print("\nTo fix these issues:")
        print("1. Remove current environment: conda remove -n ssdc --all")
        print("2. Create fresh environment: conda env create -f environment-locked.yml")
        print("3. Activate environment: conda activate ssdc")
        print("4. Install package: pip install -e .")
        print("5. Run environment verification: python verify_environment.py")
    return errors


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="run-safe-sde-control",
        description="Safe and exponentially stable neural control of stochastic systems",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    def common(sub):
        sub.add_argument("--config", help="JSON run configuration", default=None)
        sub.add_argument("--out", default=None, help="Output directory (default $SAFE_SDE_CONTROL_OUT or ./out)")
        sub.add_argument("--seed", type=int, default=None, help="Overrides the config seed")
        sub.add_argument("--workers", type=int, default=None, help="Rollout worker threads (default: cores)")
        sub.add_argument("--models", default=None, help="Directory of saved models (default: --out)")
        sub.add_argument("--verbose", action="store_true", help="Debug logging")

    common(subparsers.add_parser("train", help="Train controller, potential and class-K function"))
    common(subparsers.add_parser("project-check", help="Residuals before and after projection"))
    common(subparsers.add_parser("simulate", help="Seeded Euler-Maruyama rollouts and metrics"))
    bench = subparsers.add_parser("bench", help="train, project-check and simulate with system presets")
    bench.add_argument("system", help="gbm, double_pendulum, bicycle, fhn or three_link")
    common(bench)
    return parser


def configure_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
        force=True,
    )


def load_run_config(args, command: str, overrides: Optional[Dict] = None) -> Tuple[Dict, str]:
    """Resolve and validate the run configuration; returns (config, digest)"""
    raw = ConfigurationManager.import_config(args.config) if args.config else {}
    raw = dict(raw)
    raw.update(overrides or {})
    if args.seed is not None:
        raw["seed"] = args.seed
    out_dir = args.out or raw.get("out_dir") or ConfigurationManager.default_output_dir()
    raw["out_dir"] = os.path.abspath(out_dir)

    config = ConfigurationManager.resolve_config(raw)
    result = ValidationEngine().validate_complete(config, command, raw)
    for warning in result.warnings:
        logger.warning(warning)
    if not result.is_valid:
        message = "; ".join(result.errors)
        if result.suggestions:
            message += "\n  " + "\n  ".join(result.suggestions)
        raise ConfigurationError(message, result, result.first_field())
    return config, ConfigurationManager.config_digest(config)


def train_config_from(config: Dict) -> TrainConfig:
    return TrainConfig(
        system=config["system"],
        batch_size=int(config["batch_size"]),
        iterations=int(config["iterations"]),
        learning_rate=float(config["learning_rate"]),
        lambda1=float(config["lambda1"]),
        lambda2=float(config["lambda2"]),
        stability_rate=float(config["stability_rate"]),
        epsilon=float(config["epsilon"]),
        exponent=float(config["exponent"]),
        control_weight=config.get("control_weight"),
        trace_mode=config.get("train_trace_mode"),
        seed=int(config["seed"]),
        controller_widths=config.get("controller_widths"),
        potential_widths=config.get("potential_widths"),
        classk_widths=config.get("classk_widths") or [1, 10, 10, 1],
        control_mask=config.get("control_mask"),
        system_params=config.get("system_params") or {},
        spectral_iterations=int(config["spectral_iterations"]),
        log_every=int(config["log_every"]),
    )


def cmd_train(config: Dict, digest: str) -> int:
    result = train(train_config_from(config))
    out_dir = config["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    metadata = {"config_digest": digest, "system": config["system"], "seed": config["seed"]}
    for kind, net in (("controller", result.controller), ("potential", result.potential), ("classk", result.classk)):
        save_model(net, os.path.join(out_dir, MODEL_FILES[kind]), metadata)
    write_history_csv(result.history, os.path.join(out_dir, "history.csv"))
    ConfigurationManager.auto_save_config(config, out_dir)

    print(f"✅ Trained {config['system']} for {len(result.history)} iterations")
    if result.history:
        last = result.history[-1]
        print(f"   final L_es={format_display(last.stability)} L_sf={format_display(last.safety)} "
              f"total={format_display(last.total)}")
        print(f"   total loss trend {format_display(loss_trend(result.history))} (last window mean minus first)")
    print(f"   models and history written to {out_dir}")
    return EXIT_OK


def _model_path(models_dir: str, kind: str) -> str:
    return os.path.join(models_dir, MODEL_FILES[kind])


def _load(models_dir: str, kind: str, dim: int, required: bool = True):
    path = _model_path(models_dir, kind)
    if not required and not os.path.exists(path):
        return None
    return load_model(path, expected_kind=kind, expected_dim=dim)


def _identity_classk(s: torch.Tensor) -> torch.Tensor:
    return s


def build_components(config: Dict, models_dir: str, base_choice: str, with_certificate: bool = True):
    """
    Model, region, base controller, potential and class-K function for a command.

    Without a certificate the potential and class-K entries are None and no model files are read for them.
    """
    model, region = make_system(config["system"], config.get("system_params"))
    generator = torch.Generator().manual_seed(int(config.get("seed") or 0))

    potential, classk = None, None
    if with_certificate:
        source = config.get("potential_source", "learned")
        if source == "quadratic":
            potential = QuadraticPotential(model.dim)
        elif source == "barrier":
            potential = potential_from_barrier(region, generator=generator)
        else:
            potential = _load(models_dir, "potential", model.dim)

        classk = _load(models_dir, "classk", model.dim, required=False)
        if classk is None:
            logger.info("No class-K model in %s; using α(s) = s", models_dir)
            classk = _identity_classk

    if base_choice in ("neural", "projected"):
        base = _load(models_dir, "controller", model.dim)
    elif base_choice in ("kernel", "kernel_projected"):
        sources = None
        if config.get("kernel_samples_csv"):
            sources = load_samples_csv(config["kernel_samples_csv"], expected_dim=model.dim)
            logger.info("Kernel sources: %d states from %s", sources.shape[0], config["kernel_samples_csv"])
        base = build_kernel_controller(
            model, region, int(config["kernel_samples"]), float(config["kernel_bandwidth"]),
            float(config["flow_horizon"]), generator, sources=sources,
        )
    else:
        base = None
    return model, region, base, potential, classk


def _projected(config: Dict, model, region, base, potential, classk) -> ProjectedController:
    options = {
        "tolerance": float(config["degeneracy_tolerance"]),
        "safe_mode": config.get("project_trace_mode"),
        "stable_mode": config.get("project_trace_mode"),
    }
    if getattr(base, "time_dependent", False):
        return wrap_with_projection(base, potential, region, classk, float(config["stability_rate"]), model, **options)
    return ProjectedController(model, base, potential, region, classk, float(config["stability_rate"]), **options)


def worst_stability_point(potential, model, points: torch.Tensor, diagnostics) -> Optional[GradientReport]:
    """Gradient and generator trace of V where the projected stability residual is largest"""
    residual = diagnostics.stability_after
    if potential is None or not np.isfinite(residual).any():
        return None
    point = points[int(np.nanargmax(np.where(np.isfinite(residual), residual, np.nan)))]
    return gradient_report(potential, point, model.diffusion(point).detach())


def cmd_project_check(config: Dict, digest: str, models_dir: str) -> int:
    base_choice = config.get("base_controller") or "neural"
    model, region, base, potential, classk = build_components(config, models_dir, base_choice)
    generator = torch.Generator().manual_seed(int(config.get("seed") or 0))
    points = sample_initial_states(region, int(config["n_points"]), generator)

    projected = _projected(config, model, region, base, potential, classk)
    _, diagnostics = projected.evaluate(points)

    out_dir = config["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    diagnostics.write_csv(os.path.join(out_dir, "diagnostics.csv"))
    summary = diagnostics.summary()
    report = {"config_digest": digest, "system": config["system"], "base_controller": base_choice,
              "potential_source": config.get("potential_source"), "summary": summary}
    worst = worst_stability_point(potential, model, points, diagnostics)
    if worst is not None:
        report["worst_stability_point"] = {
            "point": worst.point.tolist(), "gradient": worst.gradient.tolist(), "hessian_trace": worst.hessian_trace,
        }
    with open(os.path.join(out_dir, "project_check.json"), "w") as f:
        json.dump(report, f, indent=4)
    ConfigurationManager.auto_save_config(config, out_dir)

    print(f"✅ project-check {config['system']} ({base_choice}, {summary['points']} points): "
          f"max stability residual {format_display(summary['max_stability_before'], decimals=10)} → "
          f"{format_display(summary['max_stability_after'], decimals=10)}, "
          f"min safety residual {format_display(summary['min_safety_before'], decimals=10)} → "
          f"{format_display(summary['min_safety_after'], decimals=10)}")
    return EXIT_OK


def initial_states(config: Dict, region, n: int, generator: torch.Generator) -> torch.Tensor:
    x0 = config.get("x0", "sample")
    if x0 == "sample":
        return sample_initial_states(region, n, generator)
    x0 = torch.tensor(x0, dtype=torch.float64)
    if x0.dim() == 1:
        return x0.unsqueeze(0).expand(n, -1)
    return x0[torch.arange(n) % x0.shape[0]]


def cmd_simulate(config: Dict, digest: str, models_dir: str, workers: Optional[int]) -> int:
    base_choice = config.get("base_controller") or "projected"
    model, region, base, potential, classk = build_components(
        config, models_dir, base_choice, with_certificate=base_choice in PROJECTED_BASES)
    controller = base
    if base_choice in PROJECTED_BASES:
        controller = _projected(config, model, region, base, potential, classk)

    seed = int(config["seed"])
    n_traj = int(config["n_traj"])
    seeds = [seed + i for i in range(n_traj)]
    x0s = initial_states(config, region, n_traj, torch.Generator().manual_seed(seed))
    trajectories = run_rollouts(model, controller, x0s, float(config["dt"]), float(config["horizon"]),
                                seeds, workers=workers)

    out_dir = config["out_dir"]
    traj_dir = os.path.join(out_dir, "trajectories")
    os.makedirs(traj_dir, exist_ok=True)
    criterion = success_criterion(config["system"], dim=model.dim)
    reports = []
    for traj in trajectories:
        traj.to_csv(os.path.join(traj_dir, f"traj_{traj.seed}.csv"))
        reports.append(evaluate_trajectory(traj, region, criterion))
    aggregate = aggregate_metrics(reports)
    with open(os.path.join(out_dir, "metrics.json"), "w") as f:
        json.dump({
            "config_digest": digest, "system": config["system"], "seed": seed,
            "base_controller": base_choice, "aggregate": aggregate,
            "per_trajectory": [r.to_dict() for r in reports],
        }, f, indent=4)
    ConfigurationManager.auto_save_config(config, out_dir)

    print_metrics_table(config["system"], base_choice, aggregate)
    if reports and aggregate["divergence_fraction"] > DIVERGENCE_LIMIT:
        print(f"❌ {aggregate['divergence_fraction']:.0%} of rollouts diverged", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def print_metrics_table(system: str, controller: str, aggregate: Dict):
    rows = [
        ("safety rate", format_display(aggregate["mean_safety_rate"], "%", 1)),
        ("success rate", format_display(aggregate["success_rate"], "%", 1)),
        ("control energy", format_display(aggregate["median_control_energy"])),
        ("lyapunov slope", format_display(aggregate["median_lyapunov_slope"], "1/s")),
    ]
    print(f"{system} / {controller} ({aggregate['n_traj']} trajectories)")
    print("-" * 40)
    for name, value in rows:
        print(f"{name:<20}{value:>20}")


def cmd_bench(args) -> int:
    system = args.system
    overrides = {"system": system}
    if args.seed is None and system in ConfigurationManager.BENCH_SEEDS:
        overrides["seed"] = ConfigurationManager.BENCH_SEEDS[system][0]
    base_out = args.out or ConfigurationManager.default_output_dir()
    args.out = os.path.join(base_out, system)

    config, digest = load_run_config(args, "bench", overrides)
    models_dir = args.models or config["out_dir"]
    print(f"Bench {system}: seed {config['seed']}, outputs in {config['out_dir']}")
    code = cmd_train(config, digest)
    if code != EXIT_OK:
        return code
    code = cmd_project_check(dict(config, base_controller="neural"), digest, models_dir)
    if code != EXIT_OK:
        return code
    return cmd_simulate(dict(config, base_controller="projected"), digest, models_dir, args.workers)


def _fail(code: int, message: str) -> int:
    print(f"❌ {message}", file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        if args.command == "bench":
            return cmd_bench(args)
        config, digest = load_run_config(args, args.command)
        models_dir = os.path.abspath(args.models) if args.models else config["out_dir"]
        if args.command == "train":
            return cmd_train(config, digest)
        if args.command == "project-check":
            return cmd_project_check(config, digest, models_dir)
        return cmd_simulate(config, digest, models_dir, args.workers)
    except ConfigurationError as e:
        return _fail(EXIT_CONFIG, f"Configuration error: {e}")
    except (UnknownSystemError, BarrierPotentialError, TraceModeError) as e:
        return _fail(EXIT_CONFIG, f"Configuration error: {e}")
    except NonFiniteLossError as e:
        return _fail(EXIT_NON_FINITE, str(e))
    except (ModelFormatError, DimensionMismatchError) as e:
        return _fail(EXIT_MODEL, f"Model error: {e}")
    except SingularMassMatrixError as e:
        return _fail(EXIT_DIVERGED, str(e))


def run_app():
    if check_environment():
        sys.exit(EXIT_ENVIRONMENT)
    print("✅ Environment check passed")
    sys.exit(main())


if __name__ == "__main__":
    run_app()

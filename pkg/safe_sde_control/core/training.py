"""
Learning stage: sample the safe region, evaluate the stabilization and safety
losses and take Adam steps on controller, potential and class-K parameters.

    L_es = mean[uᵀRu + λ₁ max(0, 𝓛ᵤV - cV)]
    L_sf = mean[uᵀRu + λ₂ max(0, -𝓛ᵤh - α(h))]

After every step the ICNN hidden weights are clamped to be nonnegative and
the controller is spectrally normalized.

Example usage:
    result = train(TrainConfig(system="gbm", iterations=300, seed=1))
    write_history_csv(result.history, "history.csv")
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from .autodiff import DTYPE, Field, as_tensor
from .dynamics import SafeRegionSpec, SdeModel, make_system
from .generator import TraceMode, call_controller, generator_terms, parse_trace_mode, select_trace_mode
from .nets import ClassKNet, ControllerNet, PotentialNet, spectral_normalize
from .precision_handler import PrecisionHandler

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    """Raised when a loss turns NaN or infinite; carries the iteration and offending state"""

    def __init__(self, iteration: int, point: Optional[Sequence[float]] = None, term: str = "loss"):
        self.iteration = iteration
        self.point = None if point is None else [float(v) for v in point]
        self.term = term
        location = f" at state {self.point}" if self.point is not None else ""
        super().__init__(f"Non-finite {term} at iteration {iteration}{location}")


@dataclass
class TrainConfig:
    """Hyperparameters of one training run; unset widths follow the state dimension"""

    system: str = "gbm"
    batch_size: int = 500
    iterations: int = 300
    learning_rate: float = 0.1
    lambda1: float = 0.5
    lambda2: float = 0.5
    stability_rate: float = -0.1
    epsilon: float = 1e-3
    exponent: float = 2.0
    control_weight: Optional[List[List[float]]] = None
    trace_mode: Optional[str] = None
    seed: int = 0
    controller_widths: Optional[List[int]] = None
    potential_widths: Optional[List[int]] = None
    classk_widths: List[int] = field(default_factory=lambda: [1, 10, 10, 1])
    control_mask: Optional[List[bool]] = None
    system_params: Dict = field(default_factory=dict)
    spectral_iterations: int = 1
    log_every: int = 50

    def __post_init__(self):
        checks = [
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("iterations", self.iterations >= 0, "must be >= 0"),
            ("learning_rate", self.learning_rate > 0, "must be positive"),
            ("lambda1", self.lambda1 > 0, "must be positive"),
            ("lambda2", self.lambda2 > 0, "must be positive"),
            ("stability_rate", self.stability_rate < 0, "must be negative"),
            ("epsilon", self.epsilon > 0, "must be positive"),
            ("exponent", self.exponent > 0, "must be positive"),
            ("spectral_iterations", self.spectral_iterations >= 1, "must be >= 1"),
        ]
        for name, ok, message in checks:
            if not ok:
                raise ValueError(f"{name} {message}, got {getattr(self, name)}")

    def control_matrix(self, dim: int) -> torch.Tensor:
        """R, identity unless configured; must be symmetric positive semidefinite"""
        if self.control_weight is None:
            return torch.eye(dim, dtype=DTYPE)
        weight = as_tensor(self.control_weight)
        if tuple(weight.shape) != (dim, dim):
            raise ValueError(f"control_weight must be {dim}x{dim}, got {tuple(weight.shape)}")
        if not torch.allclose(weight, weight.T):
            raise ValueError("control_weight must be symmetric")
        if float(torch.linalg.eigvalsh(weight).min()) < -1e-12:
            raise ValueError("control_weight must be positive semidefinite")
        return weight


@dataclass
class HistoryRecord:
    iteration: int
    stability: float
    safety: float
    total: float


@dataclass
class TrainingResult:
    controller: ControllerNet
    potential: PotentialNet
    classk: ClassKNet
    history: List[HistoryRecord]
    config: TrainConfig
    model: SdeModel
    region: SafeRegionSpec

    def final_loss(self) -> float:
        return self.history[-1].total if self.history else float("nan")


def sample_safe_region(system: Union[str, SafeRegionSpec], n: int,
                       generator: Optional[torch.Generator] = None,
                       params: Optional[Dict] = None) -> torch.Tensor:
    """n i.i.d. training states of shape (n, d) from the system's sampling region"""
    region = system if isinstance(system, SafeRegionSpec) else make_system(system, params)[1]
    return region.sample(n, generator)


def control_cost(control: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    return torch.einsum("nd,de,ne->n", control, weight, control)


def stability_terms(batch: torch.Tensor, controller: Callable, potential: Field, rate: float,
                    weight: torch.Tensor, lambda1: float, model: SdeModel, mode: TraceMode,
                    generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Per-state stabilization loss uᵀRu + λ₁ max(0, 𝓛ᵤV - cV), shape (N,)"""
    terms = generator_terms(model, potential, batch, mode, generator, create_graph=True)
    control = call_controller(controller, batch.detach())
    penalty = torch.clamp(terms.apply(control) - rate * terms.values, min=0.0)
    return control_cost(control, weight) + lambda1 * penalty


def safety_terms(batch: torch.Tensor, controller: Callable, barrier: Union[SafeRegionSpec, Field],
                 classk: Callable, weight: torch.Tensor, lambda2: float, model: SdeModel,
                 mode: TraceMode, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Per-state safety loss uᵀRu + λ₂ max(0, -𝓛ᵤh - α(h)), shape (N,)"""
    h = barrier.field if isinstance(barrier, SafeRegionSpec) else barrier
    terms = generator_terms(model, h, batch, mode, generator, create_graph=True)
    control = call_controller(controller, batch.detach())
    penalty = torch.clamp(-terms.apply(control) - classk(terms.values), min=0.0)
    return control_cost(control, weight) + lambda2 * penalty


def _check_batch(batch) -> torch.Tensor:
    batch = as_tensor(batch)
    if batch.dim() != 2 or batch.shape[0] == 0:
        raise ValueError(f"Loss batch must be a nonempty (N, d) array, got shape {tuple(batch.shape)}")
    return batch


def stability_loss(batch, controller: Callable, potential: Field, rate: float, weight, lambda1: float,
                   model: SdeModel, mode: Optional[TraceMode] = None,
                   generator: Optional[torch.Generator] = None) -> torch.Tensor:
    batch = _check_batch(batch)
    mode = select_trace_mode(model, "train") if mode is None else parse_trace_mode(mode)
    return stability_terms(batch, controller, potential, rate, as_tensor(weight), lambda1,
                           model, mode, generator).mean()


def safety_loss(batch, controller: Callable, barrier: Union[SafeRegionSpec, Field], classk: Callable,
                weight, lambda2: float, model: SdeModel, mode: Optional[TraceMode] = None,
                generator: Optional[torch.Generator] = None) -> torch.Tensor:
    batch = _check_batch(batch)
    mode = select_trace_mode(model, "train") if mode is None else parse_trace_mode(mode)
    return safety_terms(batch, controller, barrier, classk, as_tensor(weight), lambda2,
                        model, mode, generator).mean()


def build_networks(config: TrainConfig, dim: int):
    """Controller, potential and class-K networks seeded from the run seed"""
    controller_widths = config.controller_widths or [dim, 12, 12, dim]
    potential_widths = config.potential_widths or [dim, 12, 12, 1]
    controller = ControllerNet(controller_widths, mask=config.control_mask, seed=config.seed)
    potential = PotentialNet(potential_widths, epsilon=config.epsilon, exponent=config.exponent,
                             seed=config.seed + 1)
    classk = ClassKNet(config.classk_widths, seed=config.seed + 2)
    return controller, potential, classk


def _first_non_finite(values: torch.Tensor, batch: torch.Tensor):
    bad = torch.nonzero(~torch.isfinite(values.detach()))
    return batch[int(bad[0, 0])].tolist() if bad.numel() else None


def train(config: TrainConfig, model: Optional[SdeModel] = None,
          region: Optional[SafeRegionSpec] = None) -> TrainingResult:
    """
    Jointly train controller, potential and class-K function.

    Each iteration resamples the batch, evaluates L_es + L_sf with the
    training trace backend, takes an Adam step, clamps the ICNN hidden
    weights and spectrally normalizes the controller. Deterministic for a
    fixed seed on one platform.

    Raises:
        NonFiniteLossError: a loss became NaN or infinite
    """
    if model is None or region is None:
        model, region = make_system(config.system, config.system_params)
    mode = select_trace_mode(model, "train") if config.trace_mode is None else parse_trace_mode(config.trace_mode)
    mode.check(model.noise_dim)
    weight = config.control_matrix(model.dim)
    controller, potential, classk = build_networks(config, model.dim)

    generator = torch.Generator().manual_seed(config.seed)
    parameters = list(controller.parameters()) + list(potential.parameters()) + list(classk.parameters())
    optimizer = torch.optim.Adam(parameters, lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)

    history: List[HistoryRecord] = []
    logger.info("Training %s: %d iterations, batch %d, trace %s",
                model.name, config.iterations, config.batch_size, mode)
    for iteration in range(config.iterations):
        batch = region.sample(config.batch_size, generator)
        es = stability_terms(batch, controller, potential, config.stability_rate, weight,
                             config.lambda1, model, mode, generator)
        sf = safety_terms(batch, controller, region, classk, weight, config.lambda2, model, mode, generator)
        loss_es, loss_sf = es.mean(), sf.mean()
        total = loss_es + loss_sf
        if not bool(torch.isfinite(total)):
            term, per_point = ("L_es", es) if not bool(torch.isfinite(loss_es)) else ("L_sf", sf)
            raise NonFiniteLossError(iteration, _first_non_finite(per_point, batch), term)

        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        potential.clamp_convex_weights()
        spectral_normalize(controller, config.spectral_iterations)

        record = HistoryRecord(iteration, float(loss_es), float(loss_sf), float(total))
        history.append(record)
        if config.log_every and (iteration % config.log_every == 0 or iteration == config.iterations - 1):
            logger.info("Iteration %d: L_es=%.6g L_sf=%.6g total=%.6g",
                        iteration, record.stability, record.safety, record.total)

    return TrainingResult(controller, potential, classk, history, config, model, region)


HISTORY_HEADER = "iteration,L_es,L_sf,total"


def history_table(history: Sequence[HistoryRecord]) -> np.ndarray:
    rows = [(r.iteration, r.stability, r.safety, r.total) for r in history]
    return np.array(rows, dtype=np.float64).reshape(len(rows), 4)


def write_history_csv(history: Sequence[HistoryRecord], filepath: str):
    table = history_table(history)
    np.savetxt(filepath, table, delimiter=",", fmt=["%d"] + [PrecisionHandler.CSV_FORMAT] * 3,
               header=HISTORY_HEADER, comments="")


def loss_trend(history: Sequence[HistoryRecord], window: int = 10) -> float:
    """Mean total loss over the last ``window`` iterations minus the mean over the first"""
    if not history:
        return math.nan
    totals = np.array([r.total for r in history])
    window = max(1, min(window, len(totals)))
    return float(totals[-window:].mean() - totals[:window].mean())

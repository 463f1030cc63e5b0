"""
Closed-form projections of a controller onto the stochastic stability and
safety constraint sets.

    stable: u' = u - max(0, 𝓛ᵤV - cV) / ‖∇V‖² · ∇V
    safe:   u' = u + max(0, -𝓛ᵤh - α(h)) / ‖∇h‖² · ∇h

Both corrections are exact in closed form: after the correction the
constraint holds with equality up to rounding, and nothing changes where it
already held. When ‖∇·‖² falls below the degeneracy tolerance the base
control is returned unchanged.

Example usage:
    projected = compose_safe_stable(controller, potential, region, classk, -0.5, model)
    u = projected(states)
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple, Union

import numpy as np
import torch

from .autodiff import DTYPE, Field, as_batch, as_tensor
from .dynamics import SafeRegionSpec, SdeModel
from .generator import (
    GeneratorTerms,
    TraceMode,
    call_controller,
    generator_terms,
    parse_trace_mode,
    select_trace_mode,
)
from .precision_handler import PrecisionHandler, residual_tolerance

logger = logging.getLogger(__name__)

DEGENERACY_TOLERANCE = 1e-12
BARRIER_MAX_TOLERANCE = 1e-6

ClassK = Callable[[torch.Tensor], torch.Tensor]


class BarrierPotentialError(ValueError):
    """Raised when h(0) is not the maximum of the barrier over the safe region"""


class QuadraticPotential:
    """Analytic potential V(x) = ½ xᵀ P x (P defaults to the identity)"""

    def __init__(self, dim: int, matrix=None):
        self.in_features = int(dim)
        self.matrix = torch.eye(dim, dtype=DTYPE) if matrix is None else as_tensor(matrix)
        if tuple(self.matrix.shape) != (dim, dim):
            raise ValueError(f"Potential matrix must be {dim}x{dim}, got {tuple(self.matrix.shape)}")

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return 0.5 * ((x @ self.matrix) * x).sum(-1)


class BarrierPotential:
    """V(x) = h(0) - h(x), built from a barrier whose maximum over C is at the origin"""

    def __init__(self, barrier: Field, dim: int):
        self.barrier = barrier
        self.in_features = int(dim)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        origin = torch.zeros(1, self.in_features, dtype=DTYPE)
        return self.barrier(origin) - self.barrier(x)


def potential_from_barrier(region: SafeRegionSpec, n_check: int = 4096,
                           generator: Optional[torch.Generator] = None,
                           tolerance: float = BARRIER_MAX_TOLERANCE) -> BarrierPotential:
    """
    Potential V = h(0) - h for a barrier attaining its maximum at the origin.

    The maximum is checked on ``n_check`` samples of the safe region.
    """
    dim = region.dim
    h = region.field
    samples = region.sample(n_check, generator)
    with torch.no_grad():
        values = h(samples)
        inside = region.barrier(samples) >= 0
        h0 = float(h(torch.zeros(1, dim, dtype=DTYPE))[0])
        if bool(inside.any()):
            peak = float(values[inside].max())
            if peak > h0 + tolerance:
                worst = samples[inside][int(values[inside].argmax())]
                raise BarrierPotentialError(
                    f"Barrier reaches {peak:.6g} > h(0) = {h0:.6g} at {worst.tolist()}; "
                    "h(0) must be its maximum over the safe region"
                )
    return BarrierPotential(h, dim)


def _safe_denominator(sq: torch.Tensor, tolerance: float) -> Tuple[torch.Tensor, torch.Tensor]:
    usable = sq >= tolerance
    return usable, torch.where(usable, sq, torch.ones_like(sq))


def stable_correction(terms: GeneratorTerms, control: torch.Tensor, rate: float,
                      tolerance: float = DEGENERACY_TOLERANCE) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Apply the stability projection to control values.

    Returns:
        (corrected control, residual 𝓛V - cV before, residual after)
    """
    before = terms.apply(control) - rate * terms.values
    usable, sq = _safe_denominator((terms.gradient ** 2).sum(-1), tolerance)
    active = (before > 0) & usable
    scale = torch.where(active, before / sq, torch.zeros_like(before))
    corrected = torch.where(active.unsqueeze(-1), control - scale.unsqueeze(-1) * terms.gradient, control)
    after = terms.apply(corrected) - rate * terms.values
    return corrected, before, after


def safe_correction(terms: GeneratorTerms, control: torch.Tensor, classk: ClassK,
                    tolerance: float = DEGENERACY_TOLERANCE) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Apply the safety projection to control values.

    Returns:
        (corrected control, residual 𝓛h + α(h) before, residual after)
    """
    alpha = as_tensor(classk(terms.values)).detach()
    before = terms.apply(control) + alpha
    usable, sq = _safe_denominator((terms.gradient ** 2).sum(-1), tolerance)
    active = (before < 0) & usable
    scale = torch.where(active, -before / sq, torch.zeros_like(before))
    corrected = torch.where(active.unsqueeze(-1), control + scale.unsqueeze(-1) * terms.gradient, control)
    after = terms.apply(corrected) + alpha
    return corrected, before, after


def _barrier_field(barrier: Union[SafeRegionSpec, Field]) -> Field:
    return barrier.field if isinstance(barrier, SafeRegionSpec) else barrier


def project_stable(u: Optional[Callable], potential: Field, rate: float, model: SdeModel, x,
                   mode: Optional[TraceMode] = None, tolerance: float = DEGENERACY_TOLERANCE,
                   t: Optional[float] = None) -> torch.Tensor:
    """Stability-projected control at a state or a batch of states"""
    if rate >= 0:
        raise ValueError(f"Stability rate must be negative, got {rate}")
    batch, single = as_batch(x)
    mode = select_trace_mode(model, "project") if mode is None else parse_trace_mode(mode)
    terms = generator_terms(model, potential, batch, mode, create_graph=False)
    control = call_controller(u, batch, t).detach()
    corrected, _, _ = stable_correction(terms, control, rate, tolerance)
    return corrected[0] if single else corrected


def project_safe(u: Optional[Callable], barrier: Union[SafeRegionSpec, Field], classk: ClassK,
                 model: SdeModel, x, mode: Optional[TraceMode] = None,
                 tolerance: float = DEGENERACY_TOLERANCE, t: Optional[float] = None) -> torch.Tensor:
    """Safety-projected control at a state or a batch of states"""
    batch, single = as_batch(x)
    if isinstance(barrier, SafeRegionSpec):
        outside = ~(barrier.barrier(batch.detach()) >= 0)
        if bool(outside.any()):
            logger.warning("Safety projection evaluated at %d state(s) outside the safe region",
                           int(outside.sum()))
    mode = select_trace_mode(model, "project") if mode is None else parse_trace_mode(mode)
    terms = generator_terms(model, _barrier_field(barrier), batch, mode, create_graph=False)
    control = call_controller(u, batch, t).detach()
    corrected, _, _ = safe_correction(terms, control, classk, tolerance)
    return corrected[0] if single else corrected


def reference_halfspace_projection(control, normal, offset) -> torch.Tensor:
    """
    Euclidean projection of ``control`` onto {v : normal·v <= offset}.

    The minimizer of ‖v - u‖² over a half-space moves u along the normal by
    the smallest nonnegative step that reaches the boundary.
    """
    control, normal, offset = as_tensor(control), as_tensor(normal), as_tensor(offset)
    excess = (normal * control).sum(-1) - offset
    step = torch.clamp(excess, min=0.0) / (normal ** 2).sum(-1)
    return control - step.unsqueeze(-1) * normal


@dataclass
class ProjectionDiagnostics:
    """
    Per-state residuals of one ProjectedController evaluation.

    Safety residuals are 𝓛h + α(h) (feasible when >= 0), stability residuals
    are 𝓛V - cV (feasible when <= 0). ``stability_before`` is measured on the
    base control and ``safety_after`` on the final composed control. Columns
    of an absent stage hold NaN. The bounds are the pointwise acceptance
    tolerances and are not written to CSV.
    """

    states: np.ndarray
    safety_before: np.ndarray
    safety_after: np.ndarray
    stability_before: np.ndarray
    stability_after: np.ndarray
    safe_correction_norm: np.ndarray
    stable_correction_norm: np.ndarray
    stability_bound: Optional[np.ndarray] = None
    safety_bound: Optional[np.ndarray] = None

    COLUMNS = ("safety_before", "safety_after", "stability_before", "stability_after",
               "safe_correction_norm", "stable_correction_norm")

    def __len__(self):
        return self.states.shape[0]

    def header(self) -> str:
        coords = [f"x{i + 1}" for i in range(self.states.shape[1])]
        return ",".join(coords + list(self.COLUMNS))

    def table(self) -> np.ndarray:
        columns = [getattr(self, name).reshape(-1, 1) for name in self.COLUMNS]
        return np.hstack([self.states] + columns)

    def write_csv(self, filepath: str):
        np.savetxt(filepath, self.table(), delimiter=",", fmt=PrecisionHandler.CSV_FORMAT,
                   header=self.header(), comments="")

    def summary(self) -> dict:
        def worst(values, reducer):
            finite = values[np.isfinite(values)]
            return float(reducer(finite)) if finite.size else None

        def certified(holds, residual):
            if residual.size == 0 or not np.isfinite(residual).any():
                return None
            return float(np.mean(holds))

        stability_certified = safety_certified = None
        if self.stability_bound is not None:
            stability_certified = certified(self.stability_after <= self.stability_bound, self.stability_after)
        if self.safety_bound is not None:
            safety_certified = certified(self.safety_after >= -self.safety_bound, self.safety_after)
        return {
            "points": len(self),
            "max_stability_before": worst(self.stability_before, np.max),
            "max_stability_after": worst(self.stability_after, np.max),
            "min_safety_before": worst(self.safety_before, np.min),
            "min_safety_after": worst(self.safety_after, np.min),
            "stability_certified": stability_certified,
            "safety_certified": safety_certified,
        }


class ProjectedController:
    """
    Base controller corrected for safety first, then for exponential stability.

    Either stage may be absent (potential or region None). Evaluation is pure:
    diagnostics are returned per call.
    """

    def __init__(self, model: SdeModel, base: Optional[Callable] = None,
                 potential: Optional[Field] = None, region: Optional[SafeRegionSpec] = None,
                 classk: Optional[ClassK] = None, stability_rate: float = -0.1,
                 tolerance: float = DEGENERACY_TOLERANCE,
                 safe_mode: Optional[TraceMode] = None, stable_mode: Optional[TraceMode] = None):
        if stability_rate >= 0:
            raise ValueError(f"Stability rate must be negative, got {stability_rate}")
        if tolerance <= 0:
            raise ValueError(f"Degeneracy tolerance must be positive, got {tolerance}")
        if region is not None and classk is None:
            raise ValueError("A safety stage needs a class-K function")
        self.model = model
        self.base = base
        self.potential = potential
        self.region = region
        self.classk = classk
        self.stability_rate = float(stability_rate)
        self.tolerance = float(tolerance)
        self.safe_mode = parse_trace_mode(safe_mode) if safe_mode else select_trace_mode(model, "project")
        self.stable_mode = parse_trace_mode(stable_mode) if stable_mode else select_trace_mode(model, "project")
        self.safe_mode.check(model.noise_dim)
        self.stable_mode.check(model.noise_dim)
        self.time_dependent = bool(getattr(base, "time_dependent", False))
        self.in_features = model.dim

    def evaluate(self, x, t: Optional[float] = None) -> Tuple[torch.Tensor, ProjectionDiagnostics]:
        batch, single = as_batch(x)
        batch = batch.detach()
        n = batch.shape[0]
        nan = torch.full((n,), float("nan"), dtype=DTYPE)
        control = call_controller(self.base, batch, t).detach()
        base_control = control

        safety_before = safety_after = nan
        stability_before = stability_after = nan
        stability_bound = safety_bound = None
        safe_terms = None
        if self.region is not None:
            safe_terms = generator_terms(self.model, self.region.field, batch, self.safe_mode, create_graph=False)
            control, safety_before, _ = safe_correction(safe_terms, control, self.classk, self.tolerance)
        safe_control = control
        if self.potential is not None:
            stable_terms = generator_terms(self.model, self.potential, batch, self.stable_mode, create_graph=False)
            control, _, stability_after = stable_correction(stable_terms, control, self.stability_rate, self.tolerance)
            scaled = self.stability_rate * stable_terms.values
            stability_before = stable_terms.apply(base_control) - scaled
            stability_bound = residual_tolerance(scaled.detach().numpy())
        if safe_terms is not None:
            alpha = as_tensor(self.classk(safe_terms.values)).detach()
            safety_after = safe_terms.apply(control) + alpha
            safety_bound = residual_tolerance(alpha.numpy())

        diagnostics = ProjectionDiagnostics(
            states=batch.numpy().copy(),
            safety_before=safety_before.detach().numpy(),
            safety_after=safety_after.detach().numpy(),
            stability_before=stability_before.detach().numpy(),
            stability_after=stability_after.detach().numpy(),
            safe_correction_norm=(safe_control - base_control).norm(dim=-1).numpy(),
            stable_correction_norm=(control - safe_control).norm(dim=-1).numpy(),
            stability_bound=stability_bound,
            safety_bound=safety_bound,
        )
        logger.debug("Projection summary: %s", diagnostics.summary())
        return (control[0] if single else control), diagnostics

    def __call__(self, x, t: Optional[float] = None) -> torch.Tensor:
        control, _ = self.evaluate(x, t)
        return control


def compose_safe_stable(u: Optional[Callable], potential: Optional[Field], region: Optional[SafeRegionSpec],
                        classk: Optional[ClassK], rate: float, model: SdeModel, **options) -> ProjectedController:
    """Safety projection followed by stability projection of the base controller ``u``"""
    return ProjectedController(model, base=u, potential=potential, region=region, classk=classk,
                               stability_rate=rate, **options)

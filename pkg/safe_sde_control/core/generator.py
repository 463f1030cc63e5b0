"""
Infinitesimal generator of a controlled SDE applied to scalar fields.

    𝓛ᵤV(x) = ∇V(x)·(f(x) + u(x)) + ½ Tr[g(x)ᵀ HV(x) g(x)]

The trace term has three interchangeable backends:
- exact: r Hessian-vector products against the columns of g
- hutchinson: M-sample average of (H ξ)ᵀ g gᵀ ξ with Rademacher or Gaussian ξ
- vector: the r = 1 identity gᵀ ∇((stop_gradient(g))ᵀ ∇V)

Example usage:
    mode = parse_trace_mode("hutchinson:1:rademacher")
    lv = apply_generator(model, controller, potential, batch, mode, generator=rng)
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import torch

from .autodiff import (
    DTYPE,
    DimensionMismatchError,
    Field,
    as_batch,
    as_diffusion_batch,
    as_tensor,
    field_and_gradient,
    hvp_from_gradient,
    stop_gradient,
    trace_from_gradient,
)
from .dynamics import SdeModel

logger = logging.getLogger(__name__)

TRACE_KINDS = ("exact", "hutchinson", "vector")
NOISE_KINDS = ("rademacher", "gaussian")


class TraceModeError(ValueError):
    """Raised for a malformed trace mode or one incompatible with the noise dimension"""


@dataclass(frozen=True)
class TraceMode:
    kind: str = "exact"
    samples: int = 1
    noise: str = "rademacher"

    def __post_init__(self):
        if self.kind not in TRACE_KINDS:
            raise TraceModeError(f"Unknown trace mode '{self.kind}', expected one of {TRACE_KINDS}")
        if self.kind == "hutchinson":
            if self.samples < 1:
                raise TraceModeError(f"Hutchinson needs at least one sample, got {self.samples}")
            if self.noise not in NOISE_KINDS:
                raise TraceModeError(f"Unknown noise kind '{self.noise}', expected one of {NOISE_KINDS}")

    @classmethod
    def exact(cls) -> "TraceMode":
        return cls("exact")

    @classmethod
    def hutchinson(cls, samples: int = 1, noise: str = "rademacher") -> "TraceMode":
        return cls("hutchinson", samples, noise)

    @classmethod
    def vector(cls) -> "TraceMode":
        return cls("vector")

    def check(self, noise_dim: int):
        if self.kind == "vector" and noise_dim != 1:
            raise TraceModeError(f"The vector identity needs r = 1, the model has r = {noise_dim}")

    def __str__(self):
        if self.kind == "hutchinson":
            return f"hutchinson:{self.samples}:{self.noise}"
        return self.kind


def parse_trace_mode(text) -> TraceMode:
    """Parse "exact", "vector", "hutchinson", "hutchinson:M" or "hutchinson:M:noise" """
    if isinstance(text, TraceMode):
        return text
    parts = str(text).strip().lower().split(":")
    kind = parts[0]
    if kind != "hutchinson":
        if len(parts) != 1:
            raise TraceModeError(f"Trace mode '{text}' takes no options")
        return TraceMode(kind)
    if len(parts) > 3:
        raise TraceModeError(f"Malformed trace mode '{text}'")
    try:
        samples = int(parts[1]) if len(parts) > 1 else 1
    except ValueError as e:
        raise TraceModeError(f"Hutchinson sample count in '{text}' is not an integer") from e
    noise = parts[2] if len(parts) > 2 else "rademacher"
    return TraceMode.hutchinson(samples, noise)


def select_trace_mode(model: SdeModel, stage: str) -> TraceMode:
    """
    Backend rule: training uses Hutchinson (M = 1) when r > 1, projection and
    evaluation use the exact trace when r > 1; both use the vector identity
    when r = 1.
    """
    if stage not in ("train", "project", "evaluate"):
        raise ValueError(f"Unknown stage '{stage}'")
    if model.noise_dim == 1:
        return TraceMode.vector()
    if stage == "train":
        return TraceMode.hutchinson(1, "rademacher")
    return TraceMode.exact()


def noise_vectors(shape, noise: str, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Mean-zero, identity-covariance noise vectors"""
    if noise == "rademacher":
        signs = torch.randint(0, 2, shape, generator=generator)
        return (2 * signs - 1).to(DTYPE)
    if noise == "gaussian":
        return torch.randn(shape, generator=generator, dtype=DTYPE)
    raise TraceModeError(f"Unknown noise kind '{noise}'")


def hutchinson_from_gradient(grad: torch.Tensor, x: torch.Tensor, g: torch.Tensor,
                             samples: int = 1, noise: str = "rademacher",
                             generator: Optional[torch.Generator] = None,
                             create_graph: bool = True) -> torch.Tensor:
    total = torch.zeros(x.shape[0], dtype=DTYPE)
    for _ in range(samples):
        xi = noise_vectors(x.shape, noise, generator)
        hv = hvp_from_gradient(grad, x, xi, create_graph=create_graph)
        g_gt_xi = torch.einsum("ndr,nr->nd", g, torch.einsum("ndr,nd->nr", g, xi))
        total = total + (hv * g_gt_xi).sum(-1)
    return total / samples


def hutchinson_trace(field: Field, x, g, samples: int = 1, noise: str = "rademacher",
                     generator: Optional[torch.Generator] = None,
                     create_graph: bool = True) -> torch.Tensor:
    """
    Unbiased M-sample estimate of Tr[gᵀ H g].

    Args:
        field: scalar field (N, d) -> (N,)
        x: a single state (d,) or a batch (N, d)
        g: (d,), (d, r) or (N, d, r)
        samples: number of noise vectors M
        noise: "rademacher" or "gaussian"
        generator: torch generator owning the noise stream
    """
    TraceMode.hutchinson(samples, noise)
    batch, single = as_batch(x)
    g = as_diffusion_batch(g, batch.shape[0], batch.shape[-1])
    leaf, _, grad = field_and_gradient(field, batch, create_graph=True)
    trace = hutchinson_from_gradient(grad, leaf, g, samples, noise, generator, create_graph)
    return trace[0] if single else trace


def _as_column(g, batch_size: int, dim: int) -> torch.Tensor:
    g = as_tensor(g)
    if g.dim() == 3:
        if g.shape[-1] != 1:
            raise TraceModeError(f"The vector identity needs r = 1, got r = {g.shape[-1]}")
        g = g[..., 0]
    elif g.dim() == 2 and tuple(g.shape) == (dim, 1):
        g = g[:, 0]
    elif g.dim() == 2 and g.shape[-1] != dim:
        raise TraceModeError(f"The vector identity needs r = 1, got diffusion of shape {tuple(g.shape)}")
    if g.dim() == 1:
        g = g.unsqueeze(0).expand(batch_size, dim)
    if tuple(g.shape) != (batch_size, dim):
        raise DimensionMismatchError(f"Diffusion vector has shape {tuple(g.shape)}, expected {(batch_size, dim)}")
    return g


def vector_identity_from_gradient(grad: torch.Tensor, x: torch.Tensor, g: torch.Tensor,
                                  create_graph: bool = True) -> torch.Tensor:
    """gᵀ ∇((stop_gradient(g))ᵀ ∇V) with g of shape (N, d)"""
    with torch.enable_grad():
        inner = (grad * stop_gradient(g)).sum()
        (outer,) = torch.autograd.grad(inner, x, create_graph=create_graph, retain_graph=True,
                                       allow_unused=True)
    if outer is None:
        return torch.zeros(x.shape[0], dtype=DTYPE)
    return (g * outer).sum(-1)


def vector_identity_trace(field: Field, x, g, create_graph: bool = True) -> torch.Tensor:
    """
    Exact Tr[gᵀ H g] for a single noise channel.

    ``g`` is a (d,) vector, a (d, 1) column, a batch (N, d) for batched
    ``x``, or (N, d, 1).
    """
    batch, single = as_batch(x)
    column = _as_column(g, batch.shape[0], batch.shape[-1])
    leaf, _, grad = field_and_gradient(field, batch, create_graph=True)
    if not grad.requires_grad:
        trace = torch.zeros(batch.shape[0], dtype=DTYPE)
    else:
        trace = vector_identity_from_gradient(grad, leaf, column, create_graph)
    return trace[0] if single else trace


def call_controller(u: Optional[Callable], x: torch.Tensor, t: Optional[float] = None) -> torch.Tensor:
    """Evaluate a controller on a batch; time-dependent controllers receive ``t``"""
    if u is None:
        return torch.zeros_like(x)
    if getattr(u, "time_dependent", False):
        out = u(x, 0.0 if t is None else t)
    else:
        out = u(x)
    out = as_tensor(out)
    if out.shape != x.shape:
        raise DimensionMismatchError(f"Controller returned shape {tuple(out.shape)}, expected {tuple(x.shape)}")
    return out


@dataclass
class GeneratorTerms:
    """
    Control-independent part of 𝓛ᵤV on a batch.

    𝓛ᵤV = ``uncontrolled`` + ∇V·u, so projections can evaluate the generator
    for any corrected control without differentiating again.
    """

    values: torch.Tensor
    gradient: torch.Tensor
    uncontrolled: torch.Tensor
    trace: torch.Tensor

    def apply(self, control: torch.Tensor) -> torch.Tensor:
        return self.uncontrolled + (self.gradient * control).sum(-1)


def generator_terms(model: SdeModel, field: Field, x: torch.Tensor, mode: TraceMode,
                    generator: Optional[torch.Generator] = None,
                    create_graph: bool = True) -> GeneratorTerms:
    if x.shape[-1] != model.dim:
        raise DimensionMismatchError(f"Model {model.name} has d = {model.dim}, got states of size {x.shape[-1]}")
    mode.check(model.noise_dim)
    leaf, values, grad = field_and_gradient(field, x, create_graph=True)
    state = stop_gradient(leaf)
    drift = model.drift_fn(state)
    g = as_diffusion_batch(model.diffusion_fn(state), x.shape[0], model.dim)

    if not grad.requires_grad:
        trace = torch.zeros(x.shape[0], dtype=DTYPE)
    elif mode.kind == "exact":
        trace = trace_from_gradient(grad, leaf, g, create_graph=create_graph)
    elif mode.kind == "hutchinson":
        trace = hutchinson_from_gradient(grad, leaf, g, mode.samples, mode.noise, generator, create_graph)
    else:
        trace = vector_identity_from_gradient(grad, leaf, g[..., 0], create_graph=create_graph)

    if not create_graph:
        values, grad = values.detach(), grad.detach()
    uncontrolled = (grad * drift).sum(-1) + 0.5 * trace
    return GeneratorTerms(values=values, gradient=grad, uncontrolled=uncontrolled, trace=trace)


def apply_generator(model: SdeModel, u: Optional[Callable], field: Field, x, mode: TraceMode = None,
                    generator: Optional[torch.Generator] = None, t: Optional[float] = None,
                    create_graph: bool = True) -> torch.Tensor:
    """
    𝓛ᵤ field at a state or a batch of states.

    Args:
        model: the SDE supplying f and g
        u: controller map (N, d) -> (N, d), or None for the uncontrolled system
        field: scalar field, twice differentiable
        x: a single state (d,) or a batch (N, d)
        mode: trace backend; defaults to the evaluation-stage rule
        generator: noise stream for the Hutchinson backend
        t: simulation time passed to time-dependent controllers
        create_graph: keep the result differentiable in network parameters

    Returns:
        Scalar tensor for a single state, otherwise shape (N,)
    """
    batch, single = as_batch(x)
    mode = select_trace_mode(model, "evaluate") if mode is None else parse_trace_mode(mode)
    terms = generator_terms(model, field, batch, mode, generator, create_graph)
    control = call_controller(u, batch, t)
    if not create_graph:
        control = control.detach()
    value = terms.apply(control)
    return value[0] if single else value

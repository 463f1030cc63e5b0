"""
Differentiation helpers for scalar fields over the state space.

Every field used by the package is a callable mapping a batch of states of
shape (N, d) to a batch of values of shape (N,). The helpers here compute
input-space gradients, Hessian-vector products and generalized Hessian traces
on such fields, and parameter gradients of losses that themselves contain
input gradients (nested differentiation).

The engine is torch.autograd. Input gradients are built with
``create_graph=True`` so that anything computed from them stays
differentiable with respect to network parameters.

Example usage:
    grad = input_gradient(lambda x: 0.5 * (x ** 2).sum(-1), torch.tensor([3.0, 4.0]))
"""

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

DTYPE = torch.float64

Field = Callable[[torch.Tensor], torch.Tensor]
ArrayLike = Union[torch.Tensor, np.ndarray, Sequence[float], float]

FINITE_DIFFERENCE_STEP = 1e-5


class DimensionMismatchError(ValueError):
    """Raised when a field, point, direction or diffusion matrix disagree in shape"""


@dataclass
class GradientReport:
    """Gradient of a field at a single point, optionally with the generator trace"""

    point: np.ndarray
    gradient: np.ndarray
    hessian_trace: Optional[float] = None

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64).reshape(-1)
        self.gradient = np.asarray(self.gradient, dtype=np.float64).reshape(-1)
        if self.point.shape != self.gradient.shape:
            raise DimensionMismatchError(
                f"Gradient length {self.gradient.size} does not match point length {self.point.size}"
            )


def as_tensor(value: ArrayLike) -> torch.Tensor:
    """Convert to a float64 tensor without copying when already float64"""
    if isinstance(value, torch.Tensor):
        return value if value.dtype == DTYPE else value.to(DTYPE)
    return torch.as_tensor(np.asarray(value, dtype=np.float64), dtype=DTYPE)


def as_batch(x: ArrayLike) -> tuple:
    """
    Promote a single state to a batch of one.

    Returns:
        (batch tensor of shape (N, d), flag telling whether the input was a single state)
    """
    x = as_tensor(x)
    if x.dim() == 0:
        return x.reshape(1, 1), True
    if x.dim() == 1:
        return x.unsqueeze(0), True
    if x.dim() != 2:
        raise DimensionMismatchError(f"Expected a state or a batch of states, got shape {tuple(x.shape)}")
    return x, False


def stop_gradient(value: torch.Tensor) -> torch.Tensor:
    """Pass ``value`` through unchanged while severing every derivative path through it"""
    return value.detach()


def _declared_dim(fn: Field) -> Optional[int]:
    for attr in ("in_features", "dim"):
        declared = getattr(fn, attr, None)
        if isinstance(declared, int):
            return declared
    return None


def _check_arity(fn: Field, x: torch.Tensor):
    declared = _declared_dim(fn)
    if declared is not None and declared != x.shape[-1]:
        raise DimensionMismatchError(
            f"Field expects {declared}-dimensional states, got {x.shape[-1]}"
        )


def _evaluate(fn: Field, x: torch.Tensor) -> torch.Tensor:
    out = fn(x)
    out = as_tensor(out)
    if out.dim() == 2 and out.shape[-1] == 1:
        out = out.squeeze(-1)
    if out.dim() == 0:
        out = out.expand(x.shape[0])
    return out


def _grad_or_zeros(output: torch.Tensor, x: torch.Tensor, create_graph: bool) -> torch.Tensor:
    if not output.requires_grad:
        return torch.zeros_like(x)
    (grad,) = torch.autograd.grad(
        output, x, create_graph=create_graph, retain_graph=True, allow_unused=True
    )
    return torch.zeros_like(x) if grad is None else grad


def _leaf(x: torch.Tensor) -> torch.Tensor:
    if x.requires_grad:
        return x
    return x.detach().requires_grad_(True)


def field_and_gradient(fn: Field, x: torch.Tensor, create_graph: bool = True) -> tuple:
    """
    Evaluate a field and its input gradient on a batch.

    Args:
        fn: scalar field (N, d) -> (N,)
        x: batch of states (N, d); turned into a graph leaf when it is not one
        create_graph: keep the gradient differentiable (needed for Hessians and
            for parameter gradients of losses that contain the gradient)

    Returns:
        (x_leaf, values (N,), gradients (N, d))
    """
    _check_arity(fn, x)
    x = _leaf(x)
    with torch.enable_grad():
        values = _evaluate(fn, x)
        grad = _grad_or_zeros(values.sum(), x, create_graph)
    return x, values, grad


def hvp_from_gradient(grad: torch.Tensor, x: torch.Tensor, v: torch.Tensor,
                      create_graph: bool = True) -> torch.Tensor:
    """Hessian-vector product reusing an already computed gradient (built with create_graph)"""
    with torch.enable_grad():
        directional = (grad * stop_gradient(v)).sum()
        return _grad_or_zeros(directional, x, create_graph)


def _finite_difference_gradient(fn: Field, x: torch.Tensor, step: float) -> torch.Tensor:
    x = stop_gradient(x)
    grad = torch.zeros_like(x)
    with torch.no_grad():
        for i in range(x.shape[-1]):
            shift = torch.zeros_like(x)
            shift[:, i] = step
            grad[:, i] = (_evaluate(fn, x + shift) - _evaluate(fn, x - shift)) / (2 * step)
    return grad


def input_gradient(fn: Field, x: ArrayLike, method: str = "autograd",
                   create_graph: bool = True,
                   step: float = FINITE_DIFFERENCE_STEP) -> torch.Tensor:
    """
    Gradient of a scalar field with respect to its input.

    Args:
        fn: scalar field (N, d) -> (N,)
        x: a single state (d,) or a batch (N, d)
        method: "autograd" (exact) or "finite_difference" (central differences,
            cross-validation only)
        create_graph: keep the result differentiable
        step: finite-difference step

    Returns:
        Gradient with the same shape as ``x``
    """
    batch, single = as_batch(x)
    if method == "autograd":
        _, _, grad = field_and_gradient(fn, batch, create_graph=create_graph)
    elif method == "finite_difference":
        _check_arity(fn, batch)
        grad = _finite_difference_gradient(fn, batch, step)
    else:
        raise ValueError(f"Unknown differentiation method '{method}'")
    return grad[0] if single else grad


def hessian_vector_product(fn: Field, x: ArrayLike, v: ArrayLike, method: str = "autograd",
                           create_graph: bool = True,
                           step: float = FINITE_DIFFERENCE_STEP) -> torch.Tensor:
    """
    Hessian of ``fn`` at ``x`` applied to the direction ``v``.

    ``v`` may be a single direction (d,) broadcast over the batch or one
    direction per state (N, d).
    """
    batch, single = as_batch(x)
    v = as_tensor(v)
    if v.shape[-1] != batch.shape[-1]:
        raise DimensionMismatchError(
            f"Direction length {v.shape[-1]} does not match state dimension {batch.shape[-1]}"
        )
    v = v.expand_as(batch)
    if method == "autograd":
        leaf, _, grad = field_and_gradient(fn, batch, create_graph=True)
        hv = hvp_from_gradient(grad, leaf, v, create_graph=create_graph)
    elif method == "finite_difference":
        _check_arity(fn, batch)
        plus = input_gradient(fn, batch + step * v, create_graph=False)
        minus = input_gradient(fn, batch - step * v, create_graph=False)
        hv = (plus - minus) / (2 * step)
    else:
        raise ValueError(f"Unknown differentiation method '{method}'")
    return hv[0] if single else hv


def as_diffusion_batch(g: ArrayLike, batch_size: int, dim: int) -> torch.Tensor:
    """
    Bring a diffusion matrix to shape (N, d, r).

    A (d,) vector is read as r = 1 and a (d, r) matrix is shared by the whole
    batch; per-state matrices must already be (N, d, r).
    """
    g = as_tensor(g)
    if g.dim() == 1:
        g = g.unsqueeze(-1)
    if g.dim() == 2:
        g = g.unsqueeze(0).expand(batch_size, *g.shape)
    if g.dim() != 3 or g.shape[1] != dim or g.shape[0] != batch_size:
        raise DimensionMismatchError(
            f"Diffusion must have {dim} rows, got shape {tuple(g.shape)}"
        )
    return g


def trace_from_gradient(grad: torch.Tensor, x: torch.Tensor, g: torch.Tensor,
                        create_graph: bool = True) -> torch.Tensor:
    """Tr[gᵀ H g] on a batch as a sum of r Hessian-vector products against the columns of g"""
    total = torch.zeros(x.shape[0], dtype=DTYPE)
    for j in range(g.shape[-1]):
        column = g[..., j]
        hv = hvp_from_gradient(grad, x, column, create_graph=create_graph)
        total = total + (column * hv).sum(-1)
    return total


def exact_generator_trace(fn: Field, x: ArrayLike, g: ArrayLike,
                          create_graph: bool = True) -> torch.Tensor:
    """
    Exact generalized Hessian trace Tr[gᵀ Hfn(x) g].

    Args:
        fn: scalar field
        x: a single state (d,) or a batch (N, d)
        g: diffusion matrix (d, r), a batch (N, d, r), or a (d,) vector for r = 1

    Returns:
        Scalar tensor for a single state, otherwise shape (N,)
    """
    batch, single = as_batch(x)
    g = as_diffusion_batch(g, batch.shape[0], batch.shape[-1])
    leaf, _, grad = field_and_gradient(fn, batch, create_graph=True)
    trace = trace_from_gradient(grad, leaf, g, create_graph=create_graph)
    return trace[0] if single else trace


def gradient_report(fn: Field, x: ArrayLike, g: Optional[ArrayLike] = None) -> GradientReport:
    """Gradient (and trace, when a diffusion matrix is given) at one point as plain arrays"""
    point = as_tensor(x).reshape(-1)
    grad = input_gradient(fn, point, create_graph=False)
    trace = None
    if g is not None:
        trace = float(exact_generator_trace(fn, point, g, create_graph=False))
    return GradientReport(
        point=point.detach().numpy(), gradient=grad.detach().numpy(), hessian_trace=trace
    )


def parameter_gradient(loss: Callable[[torch.Tensor], torch.Tensor],
                       theta: ArrayLike) -> torch.Tensor:
    """
    Gradient of a scalar loss with respect to a flat parameter vector.

    The loss may differentiate with respect to its own inputs internally
    (input_gradient, hessian_vector_product); those inner derivatives are
    built with create_graph so the outer derivative sees them.
    """
    theta = stop_gradient(as_tensor(theta)).clone().requires_grad_(True)
    try:
        with torch.enable_grad():
            value = as_tensor(loss(theta))
            if value.numel() != 1:
                raise DimensionMismatchError(f"Loss must be scalar, got shape {tuple(value.shape)}")
            value = value.reshape(())
            if not value.requires_grad:
                return torch.zeros_like(theta)
            (grad,) = torch.autograd.grad(value, theta, allow_unused=True)
    except (RuntimeError, ValueError) as e:
        raise RuntimeError(f"Loss evaluation failed at theta={theta.detach().tolist()}: {e}") from e
    return torch.zeros_like(theta) if grad is None else grad


def finite_difference_parameter_gradient(loss: Callable[[torch.Tensor], torch.Tensor],
                                         theta: ArrayLike,
                                         step: float = FINITE_DIFFERENCE_STEP) -> torch.Tensor:
    """Central-difference counterpart of parameter_gradient (cross-validation only)"""
    theta = stop_gradient(as_tensor(theta)).clone()
    grad = torch.zeros_like(theta)
    for i in range(theta.numel()):
        shift = torch.zeros_like(theta)
        shift.view(-1)[i] = step
        plus = float(loss(theta + shift))
        minus = float(loss(theta - shift))
        grad.view(-1)[i] = (plus - minus) / (2 * step)
    return grad

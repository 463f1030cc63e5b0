"""
Controlled SDE models dx = (f(x) + u(x)) dt + g(x) dB and their safe regions.

Every benchmark is shifted so that its target equilibrium sits at the
origin. Drift maps a batch (N, d) to (N, d); diffusion maps it to (N, d, r).

Example usage:
    model, region = make_system("bicycle")
    f = model.drift(torch.zeros(4))
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
import torch

from .autodiff import DTYPE, as_batch, as_tensor

logger = logging.getLogger(__name__)

BatchMap = Callable[[torch.Tensor], torch.Tensor]
Sampler = Callable[[int, torch.Generator], torch.Tensor]


class SingularMassMatrixError(ValueError):
    """Raised when the mass matrix of a mechanical model cannot be factorized"""


class UnknownSystemError(KeyError):
    """Raised for a system name that is not in the registry"""

    def __str__(self):
        return str(self.args[0]) if self.args else "Unknown system"


@dataclass(frozen=True)
class SdeModel:
    """
    A controlled Itô SDE with equilibrium at the origin.

    Attributes:
        name: registry name
        dim: state dimension d
        noise_dim: Brownian dimension r
        drift_fn: batch map (N, d) -> (N, d)
        diffusion_fn: batch map (N, d) -> (N, d, r)
        box: per-coordinate (low, high) bounds used for sampling
        metadata: physical constants, topology and seeds for reports
    """

    name: str
    dim: int
    noise_dim: int
    drift_fn: BatchMap
    diffusion_fn: BatchMap
    box: Tuple[Tuple[float, float], ...] = ()
    metadata: Dict = field(default_factory=dict)

    def drift(self, x) -> torch.Tensor:
        batch, single = as_batch(x)
        out = self.drift_fn(batch)
        return out[0] if single else out

    def diffusion(self, x) -> torch.Tensor:
        batch, single = as_batch(x)
        out = self.diffusion_fn(batch)
        return out[0] if single else out


@dataclass(frozen=True)
class SafeRegionSpec:
    """
    Safe region C = {x : h(x) >= 0}.

    ``barrier`` is the hard barrier used for containment checks and metrics;
    ``smooth_barrier`` is the twice differentiable variant used wherever ∇h
    and the Hessian of h are needed (identical to ``barrier`` when h is
    already smooth).
    """

    barrier: BatchMap
    description: str
    sampler: Sampler
    smooth_barrier: Optional[BatchMap] = None
    dim: int = 0

    @property
    def field(self) -> BatchMap:
        return self.smooth_barrier if self.smooth_barrier is not None else self.barrier

    def contains(self, x) -> torch.Tensor:
        batch, single = as_batch(x)
        inside = self.barrier(batch) >= 0
        return inside[0] if single else inside

    def sample(self, n: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        if n < 0:
            raise ValueError(f"Sample count must be nonnegative, got {n}")
        if generator is None:
            generator = torch.Generator().manual_seed(0)
        return self.sampler(n, generator)


@dataclass(frozen=True)
class SuccessCriterion:
    """
    Success means the tracked coordinates stay within ``threshold`` of the
    target for at least ``hold_time`` consecutive seconds.

    metric "norm" uses the Euclidean norm of the tracked coordinates; metric
    "angle" uses the largest wrapped angle among them.
    """

    indices: Tuple[int, ...]
    threshold: float
    hold_time: float
    metric: str = "norm"

    def distance(self, states: np.ndarray) -> np.ndarray:
        tracked = np.asarray(states, dtype=np.float64)[:, list(self.indices)]
        if self.metric == "angle":
            wrapped = np.arctan2(np.sin(tracked), np.cos(tracked))
            return np.abs(wrapped).max(axis=1)
        return np.linalg.norm(tracked, axis=1)


def box_sampler(bounds: Sequence[Tuple[float, float]]) -> Sampler:
    low = torch.tensor([b[0] for b in bounds], dtype=DTYPE)
    high = torch.tensor([b[1] for b in bounds], dtype=DTYPE)

    def sample(n: int, generator: torch.Generator) -> torch.Tensor:
        return low + (high - low) * torch.rand(n, len(bounds), generator=generator, dtype=DTYPE)

    return sample


def make_gbm(a: float = -1.0, b: float = 1.0, radius: float = 2.0) -> Tuple[SdeModel, SafeRegionSpec]:
    """Geometric Brownian motion dx = a x dt + b x dB with safe region |x| <= radius"""

    def drift(x):
        return a * x

    def diffusion(x):
        return (b * x).unsqueeze(-1)

    def barrier(x):
        return radius ** 2 - (x ** 2).sum(-1)

    bounds = ((-radius, radius),)
    model = SdeModel("gbm", 1, 1, drift, diffusion, bounds, {"a": a, "b": b})
    region = SafeRegionSpec(barrier, f"|x| <= {radius}", box_sampler(bounds), dim=1)
    return model, region


def make_double_pendulum(m1: float = 1.0, m2: float = 1.0, l1: float = 1.0, l2: float = 1.0,
                         gravity: float = 9.81) -> Tuple[SdeModel, SafeRegionSpec]:
    """
    Double pendulum in shifted coordinates x = (θ̃₁, θ̃₂, z₁, z₂), θ̃ = θ - π.

    With the shift sin θ = -sin θ̃ while differences θ₁ - θ₂ are unchanged.
    Safe region: h = 0.5 - sin θ̃₁.
    """

    def drift(x):
        t1, t2, z1, z2 = x.unbind(-1)
        delta = t1 - t2
        s1, s2 = -torch.sin(t1), -torch.sin(t2)
        sd, cd = torch.sin(delta), torch.cos(delta)
        denom = m1 + m2 * sd ** 2
        dz1 = (m2 * gravity * s2 * cd
               - m2 * sd * (l1 * z1 ** 2 * cd + l2 * z2 ** 2)
               - (m1 + m2) * gravity * s1) / (l1 * denom)
        dz2 = ((m1 + m2) * (l1 * z1 ** 2 * sd - gravity * s2 + gravity * s1 * cd)
               + m2 * l2 * z2 ** 2 * sd * cd) / (l2 * denom)
        return torch.stack([z1, z2, dz1, dz2], dim=-1)

    def diffusion(x):
        zeros = torch.zeros_like(x[:, 0])
        return torch.stack([zeros, zeros, torch.sin(x[:, 0]), torch.sin(x[:, 1])], dim=-1).unsqueeze(-1)

    def barrier(x):
        return 0.5 - torch.sin(x[:, 0])

    bounds = ((-7 * math.pi / 6, math.pi / 6),) + ((-5.0, 5.0),) * 3
    metadata = {"m1": m1, "m2": m2, "l1": l1, "l2": l2, "gravity": gravity}
    model = SdeModel("double_pendulum", 4, 1, drift, diffusion, bounds, metadata)
    region = SafeRegionSpec(barrier, "sin(θ̃₁) <= 0.5", box_sampler(bounds), dim=4)
    return model, region


def make_bicycle(radius: float = 2.0, sample_radius: float = 3.0,
                 heading_bound: float = 3.0) -> Tuple[SdeModel, SafeRegionSpec]:
    """Kinematic bicycle x = (x, y, θ, v); position noise, round wall of the given radius"""

    def drift(x):
        px, py, heading, v = x.unbind(-1)
        return torch.stack([v * torch.cos(heading), v * torch.sin(heading), v, px ** 2 + py ** 2], dim=-1)

    def diffusion(x):
        zeros = torch.zeros_like(x[:, 0])
        return torch.stack([x[:, 0], x[:, 1], zeros, zeros], dim=-1).unsqueeze(-1)

    def barrier(x):
        return radius ** 2 - x[:, 0] ** 2 - x[:, 1] ** 2

    def sampler(n, generator):
        u = torch.rand(n, 4, generator=generator, dtype=DTYPE)
        r = sample_radius * u[:, 0]
        w = 2 * math.pi * u[:, 1]
        rest = heading_bound * (2 * u[:, 2:] - 1)
        return torch.cat([torch.stack([r * torch.cos(w), r * torch.sin(w)], dim=-1), rest], dim=-1)

    bounds = ((-sample_radius, sample_radius),) * 2 + ((-heading_bound, heading_bound),) * 2
    model = SdeModel("bicycle", 4, 1, drift, diffusion, bounds, {"radius": radius})
    region = SafeRegionSpec(barrier, f"x² + y² <= {radius ** 2:g}", sampler, dim=4)
    return model, region


def small_world_laplacian(n: int, k: int = 4, p: float = 0.1, seed: int = 0) -> np.ndarray:
    """Graph Laplacian D - A of a Watts-Strogatz small-world graph"""
    if n < 2:
        raise ValueError(f"Network needs at least 2 nodes, got {n}")
    if k < 2 or k >= n:
        raise ValueError(f"Ring degree k must satisfy 2 <= k < n, got k={k}, n={n}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"Rewiring probability must be in [0, 1], got {p}")
    graph = nx.watts_strogatz_graph(n, k, p, seed=seed)
    adjacency = nx.to_numpy_array(graph, nodelist=range(n), dtype=np.float64)
    return np.diag(adjacency.sum(axis=1)) - adjacency


def make_fhn_variance_network(n: int = 50, k: int = 4, p: float = 0.1, seed: int = 0,
                              noise_scale: float = 1.0 / 3.0, bound: float = 5.0,
                              sharpness: float = 20.0) -> Tuple[SdeModel, SafeRegionSpec]:
    """
    Linearized variance dynamics of n coupled FitzHugh-Nagumo oscillators.

    State δ interleaves (ṽ₁, w̃₁, ..., ṽₙ, w̃ₙ). Drift is (I ⊗ J)δ with J the
    single-oscillator Jacobian at ṽ = 0; noise couples the fast variables
    through the Laplacian, noise_scale Σⱼ Lᵢⱼ ṽⱼ, on one shared Brownian motion.
    """
    laplacian_np = small_world_laplacian(n, k, p, seed)
    laplacian = torch.tensor(laplacian_np, dtype=DTYPE)
    jacobian = torch.tensor([[1.0, -1.0], [0.1, -0.08]], dtype=DTYPE)
    dim = 2 * n

    def drift(x):
        pairs = x.reshape(x.shape[0], n, 2)
        return (pairs @ jacobian.T).reshape(x.shape[0], dim)

    def diffusion(x):
        fast = x[:, 0::2]
        out = torch.zeros_like(x)
        out[:, 0::2] = noise_scale * fast @ laplacian.T
        return out.unsqueeze(-1)

    def barrier(x):
        return bound ** 2 - (x ** 2).max(dim=-1).values

    def smooth_barrier(x):
        return bound ** 2 - torch.logsumexp(sharpness * x ** 2, dim=-1) / sharpness

    bounds = ((-bound, bound),) * dim
    metadata = {
        "n": n, "k": k, "p": p, "topology_seed": seed, "noise_scale": noise_scale,
        "sharpness": sharpness, "edges": int(np.count_nonzero(np.triu(laplacian_np, 1))),
    }
    model = SdeModel("fhn", dim, 1, drift, diffusion, bounds, metadata)
    region = SafeRegionSpec(barrier, f"max(ṽᵢ², w̃ᵢ²) <= {bound ** 2:g}", box_sampler(bounds),
                            smooth_barrier=smooth_barrier, dim=dim)
    return model, region


def three_link_coefficients(masses=(1.0, 1.0, 1.0), lengths=(1.0, 1.0, 1.0),
                            inertias=(1.0, 1.0, 1.0), centers=(1.0, 1.0, 1.0)) -> Tuple[np.ndarray, np.ndarray]:
    """Inertia coefficients aᵢⱼ and gravity coefficients bᵢ of the 3-link pendulum"""
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for i in range(3):
        outer = sum(masses[i + 1:])
        a[i, i] = inertias[i] + masses[i] * centers[i] ** 2 + lengths[i] ** 2 * outer
        b[i] = masses[i] * centers[i] + lengths[i] * outer
        for j in range(i + 1, 3):
            a[i, j] = a[j, i] = masses[j] * lengths[i] * centers[j] + lengths[i] * lengths[j] * sum(masses[j + 1:])
    return a, b


def three_link_mass_matrix(x: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """M(x)ᵢⱼ = aᵢⱼ cos(θⱼ - θᵢ) on a batch, shape (N, 3, 3)"""
    angles = x[:, :3]
    diff = angles.unsqueeze(1) - angles.unsqueeze(2)
    return a * torch.cos(diff)


def make_three_link(masses=(1.0, 1.0, 1.0), lengths=(1.0, 1.0, 1.0), inertias=(1.0, 1.0, 1.0),
                    centers=(1.0, 1.0, 1.0)) -> Tuple[SdeModel, SafeRegionSpec]:
    """
    Planar 3-link pendulum in shifted coordinates (θ̃₁, θ̃₂, θ̃₃, ω₁, ω₂, ω₃).

    Angular acceleration solves M(x) ẏ = -N(x, y) y - Q(x) by Cholesky; with
    the shift Qᵢ = bᵢ sin θ̃ᵢ. Safe region: h = 0.5 - sin θ̃₁.
    """
    a_np, b_np = three_link_coefficients(masses, lengths, inertias, centers)
    a = torch.tensor(a_np, dtype=DTYPE)
    b = torch.tensor(b_np, dtype=DTYPE)

    def drift(x):
        angles, rates = x[:, :3], x[:, 3:]
        diff = angles.unsqueeze(1) - angles.unsqueeze(2)
        mass = three_link_mass_matrix(x, a)
        coriolis = -a * rates.unsqueeze(1) * torch.sin(diff)
        gravity = b * torch.sin(angles)
        rhs = -(coriolis @ rates.unsqueeze(-1)).squeeze(-1) - gravity
        factor, info = torch.linalg.cholesky_ex(mass)
        if bool((info != 0).any()):
            bad = int(torch.nonzero(info)[0, 0])
            raise SingularMassMatrixError(
                f"Mass matrix is not positive definite at state {x[bad].detach().tolist()}"
            )
        accel = torch.cholesky_solve(rhs.unsqueeze(-1), factor).squeeze(-1)
        return torch.cat([rates, accel], dim=-1)

    def diffusion(x):
        return torch.cat([torch.zeros_like(x[:, :3]), torch.sin(x[:, :3])], dim=-1).unsqueeze(-1)

    def barrier(x):
        return 0.5 - torch.sin(x[:, 0])

    bounds = ((-7 * math.pi / 6, math.pi / 6),) + ((-5.0, 5.0),) * 5
    metadata = {"a": a_np.tolist(), "b": b_np.tolist(), "masses": list(masses), "lengths": list(lengths)}
    model = SdeModel("three_link", 6, 1, drift, diffusion, bounds, metadata)
    region = SafeRegionSpec(barrier, "sin(θ̃₁) <= 0.5", box_sampler(bounds), dim=6)
    return model, region


SYSTEMS: Dict[str, Callable[..., Tuple[SdeModel, SafeRegionSpec]]] = {
    "gbm": make_gbm,
    "double_pendulum": make_double_pendulum,
    "bicycle": make_bicycle,
    "fhn": make_fhn_variance_network,
    "three_link": make_three_link,
}

SUCCESS_CRITERIA: Dict[str, SuccessCriterion] = {
    "gbm": SuccessCriterion((0,), 0.1, 2.0),
    "double_pendulum": SuccessCriterion((0, 1), math.pi / 40, 3.0, metric="angle"),
    "bicycle": SuccessCriterion((0, 1), 0.1, 2.0),
    "fhn": SuccessCriterion(tuple(range(100)), 0.1, 2.0),
    "three_link": SuccessCriterion((0, 1, 2), math.pi / 40, 3.0, metric="angle"),
}


def make_system(name: str, params: Optional[Dict] = None) -> Tuple[SdeModel, SafeRegionSpec]:
    """Build a registered system, passing ``params`` as keyword overrides"""
    if name not in SYSTEMS:
        raise UnknownSystemError(
            f"Unknown system '{name}'. Valid systems: {', '.join(sorted(SYSTEMS))}"
        )
    try:
        model, region = SYSTEMS[name](**(params or {}))
    except TypeError as e:
        raise ValueError(f"Invalid parameters for system '{name}': {e}") from e
    logger.debug("Built system %s (d=%d, r=%d)", name, model.dim, model.noise_dim)
    return model, region


def success_criterion(name: str, dim: Optional[int] = None, **overrides) -> SuccessCriterion:
    if name not in SUCCESS_CRITERIA:
        raise UnknownSystemError(f"No success criterion for system '{name}'")
    criterion = SUCCESS_CRITERIA[name]
    if name == "fhn" and dim is not None:
        criterion = SuccessCriterion(tuple(range(dim)), criterion.threshold, criterion.hold_time)
    values = {
        "indices": criterion.indices, "threshold": criterion.threshold,
        "hold_time": criterion.hold_time, "metric": criterion.metric,
    }
    values.update({key: value for key, value in overrides.items() if value is not None})
    return SuccessCriterion(**values)

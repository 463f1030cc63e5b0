"""
Nonparametric kernel controller in the rectified-flow style.

Paired samples z̃₀ (sources) and z̃₁ (targets) define the interpolant
z̃(t) = (1 - t) z̃₀ + t z̃₁. The control at z is the Gaussian-kernel weighted
average of (z̃₁ - z)/(1 - t), self-normalized over samples, minus the model
drift f(z):

    u(z, t) = Σᵢ wᵢ (z̃₁ⁱ - z)/(1 - t) - f(z),  wᵢ ∝ exp(-‖z̃ⁱ(t) - z‖² / h)

When every kernel weight underflows the weights fall back to uniform and the
evaluation is flagged.
"""

import logging
from typing import Optional, Tuple

import numpy as np
import torch

from .autodiff import DTYPE, DimensionMismatchError, Field, as_batch, as_tensor
from .dynamics import SafeRegionSpec, SdeModel
from .projection import ProjectedController, compose_safe_stable

logger = logging.getLogger(__name__)

MAX_FLOW_TIME = 0.99


class KernelController:
    """Untrained kernel controller; immutable after construction"""

    time_dependent = True

    def __init__(self, model: SdeModel, sources, targets=None, bandwidth: float = 1e-3,
                 flow_horizon: float = 20.0, chunk_size: int = 4096):
        sources = as_tensor(sources)
        if sources.dim() != 2 or sources.shape[0] == 0:
            raise ValueError(f"Source samples must be a nonempty (n, d) array, got shape {tuple(sources.shape)}")
        targets = torch.zeros_like(sources) if targets is None else as_tensor(targets)
        if targets.shape != sources.shape:
            raise ValueError(f"Targets {tuple(targets.shape)} must pair with sources {tuple(sources.shape)}")
        if sources.shape[1] != model.dim:
            raise ValueError(f"Samples have dimension {sources.shape[1]}, model has {model.dim}")
        if not bandwidth > 0:
            raise ValueError(f"Bandwidth must be positive, got {bandwidth}")
        if not flow_horizon > 0:
            raise ValueError(f"Flow horizon must be positive, got {flow_horizon}")
        self.model = model
        self.sources = sources
        self.targets = targets
        self.bandwidth = float(bandwidth)
        self.flow_horizon = float(flow_horizon)
        self.chunk_size = int(chunk_size)
        self.in_features = model.dim

    def __len__(self):
        return self.sources.shape[0]

    def flow_time(self, sim_time: float) -> float:
        """Map simulation time to t = clamp(sim_time / T_flow, 0, 0.99)"""
        return float(min(max(sim_time / self.flow_horizon, 0.0), MAX_FLOW_TIME))

    def interpolant(self, t: float) -> torch.Tensor:
        return (1.0 - t) * self.sources + t * self.targets

    def weights(self, z, t: float) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Self-normalized kernel weights over all samples.

        Returns:
            (weights (N, n), fallback flags (N,)) where flagged rows are uniform
        """
        batch, _ = as_batch(z)
        raw = torch.exp(-torch.cdist(batch, self.interpolant(t)) ** 2 / self.bandwidth)
        total = raw.sum(-1, keepdim=True)
        fallback = ~(torch.isfinite(total) & (total > 0)).squeeze(-1)
        uniform = torch.full_like(raw, 1.0 / raw.shape[-1])
        safe_total = torch.where(fallback.unsqueeze(-1), torch.ones_like(total), total)
        weights = torch.where(fallback.unsqueeze(-1), uniform, raw / safe_total)
        return weights, fallback

    def _weighted_targets(self, batch: torch.Tensor, t: float) -> Tuple[torch.Tensor, torch.Tensor]:
        if len(self) <= self.chunk_size:
            weights, fallback = self.weights(batch, t)
            return weights @ self.targets, fallback
        zt = self.interpolant(t)
        total = torch.zeros(batch.shape[0], 1, dtype=DTYPE)
        weighted = torch.zeros_like(batch)
        for start in range(0, zt.shape[0], self.chunk_size):
            raw = torch.exp(-torch.cdist(batch, zt[start:start + self.chunk_size]) ** 2 / self.bandwidth)
            total = total + raw.sum(-1, keepdim=True)
            weighted = weighted + raw @ self.targets[start:start + self.chunk_size]
        fallback = ~(torch.isfinite(total) & (total > 0)).squeeze(-1)
        safe_total = torch.where(fallback.unsqueeze(-1), torch.ones_like(total), total)
        mean_target = self.targets.mean(0).expand_as(batch)
        return torch.where(fallback.unsqueeze(-1), mean_target, weighted / safe_total), fallback

    def control(self, z, t: float) -> Tuple[torch.Tensor, torch.Tensor]:
        """Control at flow time t together with the per-row fallback flags"""
        if not t < 1.0:
            raise ValueError(f"Flow time must be < 1, got {t}")
        batch, single = as_batch(z)
        batch = batch.detach()
        target, fallback = self._weighted_targets(batch, t)
        with torch.no_grad():
            drift = self.model.drift_fn(batch)
        u = (target - batch) / (1.0 - t) - drift
        if bool(fallback.any()):
            logger.warning("Kernel weights underflowed at %d of %d states; used uniform weights",
                           int(fallback.sum()), batch.shape[0])
        return (u[0], fallback[0]) if single else (u, fallback)

    def __call__(self, z, sim_time: float = 0.0) -> torch.Tensor:
        u, _ = self.control(z, self.flow_time(sim_time))
        return u


def kernel_control(controller: KernelController, z, t: float) -> torch.Tensor:
    """Kernel control at flow time t ∈ [0, 1)"""
    u, _ = controller.control(z, t)
    return u


def build_kernel_controller(model: SdeModel, region: SafeRegionSpec, n_samples: int = 10000,
                            bandwidth: float = 1e-3, flow_horizon: float = 20.0,
                            generator: Optional[torch.Generator] = None,
                            sources: Optional[torch.Tensor] = None) -> KernelController:
    """Sources drawn from the sampling region unless given, all targets at the origin"""
    if sources is None:
        sources = region.sample(n_samples, generator)
    return KernelController(model, sources, None, bandwidth, flow_horizon)


def load_samples_csv(filepath: str, expected_dim: Optional[int] = None) -> torch.Tensor:
    """States of a trajectory CSV (t, x1..xd, u1..ud) as an (n, d) tensor"""
    table = np.loadtxt(filepath, delimiter=",", skiprows=1, ndmin=2)
    d = (table.shape[1] - 1) // 2
    if expected_dim is not None and (table.shape[1] != 1 + 2 * expected_dim or table.shape[0] == 0):
        raise DimensionMismatchError(
            f"{filepath}: expected rows of t, {expected_dim} states and {expected_dim} controls, "
            f"got {table.shape[0]} rows of {table.shape[1]} columns"
        )
    return torch.tensor(table[:, 1:1 + d], dtype=DTYPE)


def wrap_with_projection(controller: KernelController, potential: Optional[Field],
                         region: Optional[SafeRegionSpec], classk, rate: float,
                         model: SdeModel, **options) -> ProjectedController:
    """Safety then stability projection around an untrained kernel controller"""
    return compose_safe_stable(controller, potential, region, classk, rate, model, **options)

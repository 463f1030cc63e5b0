"""
Euler-Maruyama rollouts and trajectory metrics.

    x_{k+1} = x_k + dt (f(x_k) + u(x_k)) + g(x_k) ΔB_k,   ΔB_k ~ N(0, dt I_r)

Each trajectory owns a seeded noise stream, so a rollout depends only on its
seed and not on how trajectories are batched or scheduled. States that turn
non-finite end their trajectory (marked diverged); nothing is clamped at the
boundary of the safe region.

Example usage:
    traj = euler_maruyama(model, controller, x0, dt=1e-3, horizon=20.0, seed=3)
    report = evaluate_trajectory(traj, region, success_criterion("bicycle"))
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .autodiff import DTYPE, as_tensor
from .dynamics import SafeRegionSpec, SdeModel, SuccessCriterion
from .generator import call_controller
from .precision_handler import PrecisionHandler

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 25


@dataclass
class Trajectory:
    """
    A recorded path: times (K+1,), states (K+1, d) and the control applied at
    each state (K+1, d).
    """

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    seed: int
    dt: float
    diverged: bool = False

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        self.controls = np.asarray(self.controls, dtype=np.float64)
        if self.states.ndim == 1:
            self.states = self.states.reshape(-1, 1)
        if self.controls.ndim == 1:
            self.controls = self.controls.reshape(-1, 1)
        if not (len(self.times) == len(self.states) == len(self.controls)):
            raise ValueError(
                f"times, states and controls differ in length: "
                f"{len(self.times)}, {len(self.states)}, {len(self.controls)}"
            )
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("Trajectory times must be strictly increasing")

    def __len__(self):
        return len(self.times)

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def header(self) -> str:
        d = self.dim
        return ",".join(["t"] + [f"x{i + 1}" for i in range(d)] + [f"u{i + 1}" for i in range(d)])

    def to_csv(self, filepath: str):
        table = np.hstack([self.times.reshape(-1, 1), self.states, self.controls])
        np.savetxt(filepath, table, delimiter=",", fmt=PrecisionHandler.CSV_FORMAT,
                   header=self.header(), comments="")

    @classmethod
    def from_csv(cls, filepath: str, seed: int = 0) -> "Trajectory":
        table = np.loadtxt(filepath, delimiter=",", skiprows=1, ndmin=2)
        d = (table.shape[1] - 1) // 2
        times = table[:, 0]
        dt = float(times[1] - times[0]) if len(times) > 1 else 0.0
        return cls(times, table[:, 1:1 + d], table[:, 1 + d:], seed, dt)


@dataclass
class MetricsReport:
    safety_rate: float
    success: bool
    control_energy: float
    lyapunov_slope: float
    min_target_distance: float
    target_distance_std: float
    max_target_distance: float
    seed: int
    diverged: bool = False

    def to_dict(self) -> Dict:
        """JSON-ready dict; non-finite numbers become None"""
        out = {}
        for key, value in asdict(self).items():
            if isinstance(value, float) and not math.isfinite(value):
                value = None
            out[key] = value
        return out


def brownian_increments(seed: int, steps: int, noise_dim: int, dt: float) -> torch.Tensor:
    """ΔB of one trajectory, shape (steps, r), from its own seeded stream"""
    generator = torch.Generator().manual_seed(int(seed))
    return math.sqrt(dt) * torch.randn(steps, noise_dim, generator=generator, dtype=DTYPE)


def step_count(dt: float, horizon: float) -> int:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if horizon < 0:
        raise ValueError(f"Horizon must be nonnegative, got {horizon}")
    return int(round(horizon / dt))


def simulate_batch(model: SdeModel, controller: Optional[Callable], x0, dt: float, horizon: float,
                   seeds: Sequence[int], increments: Optional[torch.Tensor] = None) -> List[Trajectory]:
    """
    Integrate one trajectory per seed in lockstep.

    Args:
        model: controlled SDE
        controller: map (N, d) -> (N, d) (time-dependent controllers also get t), or None
        x0: shared initial state (d,) or one per seed (K, d)
        dt: step size
        horizon: final time T
        seeds: one seed per trajectory
        increments: optional Brownian increments (K, steps, r) replacing the seeded draws

    Returns:
        Trajectories in seed order
    """
    steps = step_count(dt, horizon)
    seeds = [int(s) for s in seeds]
    k = len(seeds)
    if k == 0:
        return []
    x0 = as_tensor(x0)
    if x0.dim() == 1:
        x0 = x0.unsqueeze(0).expand(k, -1)
    if tuple(x0.shape) != (k, model.dim):
        raise ValueError(f"Initial states must have shape {(k, model.dim)}, got {tuple(x0.shape)}")
    if increments is None:
        increments = torch.stack([brownian_increments(s, steps, model.noise_dim, dt) for s in seeds])
    increments = as_tensor(increments)
    if tuple(increments.shape) != (k, steps, model.noise_dim):
        raise ValueError(f"Increments must have shape {(k, steps, model.noise_dim)}, got {tuple(increments.shape)}")

    states = torch.zeros(k, steps + 1, model.dim, dtype=DTYPE)
    controls = torch.zeros(k, steps + 1, model.dim, dtype=DTYPE)
    lengths = torch.full((k,), steps + 1, dtype=torch.long)
    states[:, 0] = x0
    alive = torch.isfinite(x0).all(dim=-1)
    lengths[~alive] = 1
    x = x0.clone()

    for step in range(steps + 1):
        index = torch.nonzero(alive).squeeze(-1)
        if index.numel() == 0:
            break
        current = x[index]
        with torch.no_grad():
            u = call_controller(controller, current, step * dt)
        controls[index, step] = u
        if step == steps:
            break
        with torch.no_grad():
            drift = model.drift_fn(current)
            g = model.diffusion_fn(current)
            noise = torch.einsum("ndr,nr->nd", g, increments[index, step])
            nxt = current + dt * (drift + u) + noise
        finite = torch.isfinite(nxt).all(dim=-1)
        states[index[finite], step + 1] = nxt[finite]
        x[index[finite]] = nxt[finite]
        dead = index[~finite]
        if dead.numel():
            lengths[dead] = step + 1
            alive[dead] = False
            logger.warning("%d trajectory(ies) diverged at t=%.6g", int(dead.numel()), (step + 1) * dt)

    times = dt * np.arange(steps + 1, dtype=np.float64)
    trajectories = []
    for i, seed in enumerate(seeds):
        n = int(lengths[i])
        trajectories.append(Trajectory(
            times=times[:n], states=states[i, :n].numpy(), controls=controls[i, :n].numpy(),
            seed=seed, dt=dt, diverged=n < steps + 1,
        ))
    return trajectories


def euler_maruyama(model: SdeModel, controller: Optional[Callable], x0, dt: float, horizon: float,
                   seed: int = 0) -> Trajectory:
    """Single seeded rollout; T = 0 gives a trajectory holding only x0"""
    x0 = as_tensor(x0).reshape(-1)
    return simulate_batch(model, controller, x0, dt, horizon, [seed])[0]


def run_rollouts(model: SdeModel, controller: Optional[Callable], x0s, dt: float, horizon: float,
                 seeds: Sequence[int], workers: Optional[int] = None,
                 chunk_size: int = DEFAULT_CHUNK_SIZE) -> List[Trajectory]:
    """
    Rollouts for many seeds on a thread pool.

    Seeds are split into fixed chunks independent of ``workers``, so the
    result does not depend on scheduling.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        return []
    x0s = as_tensor(x0s)
    if x0s.dim() == 1:
        x0s = x0s.unsqueeze(0).expand(len(seeds), -1)
    chunks = [(seeds[i:i + chunk_size], x0s[i:i + chunk_size]) for i in range(0, len(seeds), chunk_size)]
    workers = workers or os.cpu_count() or 1
    logger.info("Running %d rollouts in %d chunk(s) on %d worker(s)", len(seeds), len(chunks), workers)

    def run(chunk):
        chunk_seeds, chunk_x0 = chunk
        return simulate_batch(model, controller, chunk_x0, dt, horizon, chunk_seeds)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, chunks))
    return [traj for chunk in results for traj in chunk]


def sample_initial_states(region: SafeRegionSpec, n: int, generator: Optional[torch.Generator] = None,
                          max_rounds: int = 100) -> torch.Tensor:
    """n states drawn from the sampling region and kept only when inside C"""
    if n == 0:
        return torch.zeros(0, region.dim, dtype=DTYPE)
    kept = []
    total = 0
    for _ in range(max_rounds):
        candidates = region.sample(max(n, 16), generator)
        inside = candidates[region.contains(candidates)]
        kept.append(inside)
        total += inside.shape[0]
        if total >= n:
            return torch.cat(kept)[:n]
    raise RuntimeError(f"Could not draw {n} initial states inside the safe region")


def safety_rate(traj: Trajectory, region: SafeRegionSpec) -> float:
    """Fraction of recorded states with h(x) >= 0 on the hard barrier"""
    if len(traj) == 0:
        return float("nan")
    with torch.no_grad():
        inside = region.barrier(as_tensor(traj.states)) >= 0
    return float(inside.to(DTYPE).mean())


def success(traj: Trajectory, criterion: SuccessCriterion) -> bool:
    """True when the tracked distance stays below threshold for hold_time consecutive seconds"""
    if len(traj) == 0:
        return False
    within = criterion.distance(traj.states) < criterion.threshold
    slack = 1e-9 * max(1.0, criterion.hold_time)
    start = None
    for i, inside in enumerate(within):
        if not inside:
            start = None
            continue
        if start is None:
            start = i
        if traj.times[i] - traj.times[start] >= criterion.hold_time - slack:
            return True
    return False


def control_energy(traj: Trajectory) -> float:
    """Left Riemann sum Σ ‖u_k‖² dt over every step but the last state"""
    if len(traj) < 2:
        return 0.0
    return float((traj.controls[:-1] ** 2).sum() * traj.dt)


def lyapunov_slope(traj: Trajectory) -> float:
    """
    Least-squares slope of log‖x(t)‖ against t over the second half of the horizon.

    Returns -inf when every state in the window is zero and NaN when fewer
    than two usable states remain.
    """
    half = len(traj) // 2
    times = traj.times[half:]
    norms = np.linalg.norm(traj.states[half:], axis=1)
    usable = np.isfinite(norms) & (norms > 0)
    if len(norms) and not usable.any() and np.all(norms[np.isfinite(norms)] == 0):
        return float("-inf")
    if usable.sum() < 2:
        return float("nan")
    slope, _ = np.polyfit(times[usable], np.log(norms[usable]), 1)
    return float(slope)


def target_distance_stats(traj: Trajectory, criterion: SuccessCriterion) -> Dict[str, float]:
    distance = criterion.distance(traj.states)
    if distance.size == 0:
        return {"min": float("nan"), "std": float("nan"), "max": float("nan")}
    return {"min": float(distance.min()), "std": float(distance.std()), "max": float(distance.max())}


def evaluate_trajectory(traj: Trajectory, region: SafeRegionSpec, criterion: SuccessCriterion) -> MetricsReport:
    stats = target_distance_stats(traj, criterion)
    return MetricsReport(
        safety_rate=safety_rate(traj, region),
        success=success(traj, criterion),
        control_energy=control_energy(traj),
        lyapunov_slope=lyapunov_slope(traj),
        min_target_distance=stats["min"],
        target_distance_std=stats["std"],
        max_target_distance=stats["max"],
        seed=traj.seed,
        diverged=traj.diverged,
    )


def _finite_median(values) -> Optional[float]:
    values = np.asarray([v for v in values if v is not None and math.isfinite(v)], dtype=np.float64)
    return float(np.median(values)) if values.size else None


def aggregate_metrics(reports: Sequence[MetricsReport]) -> Dict:
    """Mean safety rate, success rate, median control energy and median slope over rollouts"""
    if not reports:
        return {
            "n_traj": 0, "mean_safety_rate": None, "success_rate": None,
            "median_control_energy": None, "median_lyapunov_slope": None,
            "min_target_distance": None, "divergence_fraction": None,
        }
    return {
        "n_traj": len(reports),
        "mean_safety_rate": float(np.mean([r.safety_rate for r in reports])),
        "success_rate": float(np.mean([r.success for r in reports])),
        "median_control_energy": _finite_median([r.control_energy for r in reports]),
        "median_lyapunov_slope": _finite_median([r.lyapunov_slope for r in reports]),
        "min_target_distance": _finite_median([r.min_target_distance for r in reports]),
        "divergence_fraction": float(np.mean([r.diverged for r in reports])),
    }

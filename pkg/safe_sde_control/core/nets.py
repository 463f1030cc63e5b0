"""
Parameterized function families used by the controller synthesis.

This module provides:
- ControllerNet: u(x) = diag(x) NN(x) with an output mask, kept Lipschitz by
  spectral normalization
- PotentialNet: input convex network wrapped as V(x) = σ(p(x) - p(0)) + ε‖x‖^p
- ClassKNet: α(s) = ∫₀ˢ q(z) dz with a strictly positive integrand network
- Versioned JSON serialization for all three

Example usage:
    controller = ControllerNet([4, 12, 12, 4], seed=0)
    spectral_normalize(controller, iterations=50)
    save_model(controller, "controller.json")
"""

import json
import logging
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff import DTYPE, as_tensor

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
SPECTRAL_GUARD = 1e-12
SERIALIZATION_POWER_ITERATIONS = 50

ACTIVATIONS: Dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "tanh": torch.tanh,
    "softplus": F.softplus,
    "elu": F.elu,
    "relu": F.relu,
}


class NonFiniteInputError(ValueError):
    """Raised when a network is evaluated on NaN or infinite states"""


class ModelFormatError(ValueError):
    """Raised when a serialized model does not match the expected kind or shapes"""


def _check_finite(x: torch.Tensor, owner: str):
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteInputError(f"{owner} received a non-finite input")


def _seeded(seed: Optional[int]):
    """Fork the global RNG so seeded construction leaves it untouched"""
    rng = torch.random.fork_rng()
    rng.__enter__()
    if seed is not None:
        torch.manual_seed(seed)
    return rng


def smooth_relu(z: torch.Tensor, width: float = 0.1) -> torch.Tensor:
    """
    Twice continuously differentiable ReLU.

    Zero for z <= 0, z - width/2 for z >= width and a quartic blend in between
    whose second derivative vanishes at both ends. Convex, nondecreasing and
    exactly zero at the origin.
    """
    zc = z.clamp(min=0.0, max=width)
    blend = zc ** 3 / width ** 2 - zc ** 4 / (2 * width ** 3)
    return torch.where(z >= width, z - width / 2, blend)


class ControllerNet(nn.Module):
    """Lipschitz controller u(x) = diag(x) NN(x), masked componentwise"""

    kind = "controller"

    def __init__(self, widths: Sequence[int], activation: str = "tanh",
                 mask: Optional[Sequence[bool]] = None, seed: Optional[int] = None):
        super().__init__()
        widths = [int(w) for w in widths]
        if len(widths) < 2 or widths[0] != widths[-1]:
            raise ValueError(f"Controller widths must start and end at the state dimension, got {widths}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"Unknown activation '{activation}'")
        self.widths = widths
        self.activation = activation
        self.in_features = widths[0]

        rng = _seeded(seed)
        try:
            layers = []
            for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
                last = i == len(widths) - 2
                layers.append(nn.Linear(fan_in, fan_out, bias=not last, dtype=DTYPE))
            self.layers = nn.ModuleList(layers)
            for i, layer in enumerate(self.layers):
                u = torch.randn(layer.out_features, dtype=DTYPE)
                self.register_buffer(f"power_vector_{i}", u / u.norm())
        finally:
            rng.__exit__(None, None, None)

        if mask is None:
            mask = [True] * widths[0]
        if len(mask) != widths[0]:
            raise ValueError(f"Mask length {len(mask)} does not match state dimension {widths[0]}")
        self.register_buffer("mask", torch.tensor([bool(m) for m in mask]))
        self.register_buffer("layer_norms", torch.ones(len(self.layers), dtype=DTYPE))

    def hyperparameters(self) -> Dict:
        return {
            "widths": self.widths,
            "activation": self.activation,
            "mask": [bool(m) for m in self.mask.tolist()],
        }

    def power_vector(self, i: int) -> torch.Tensor:
        return getattr(self, f"power_vector_{i}")

    def network(self, x: torch.Tensor) -> torch.Tensor:
        """The unmasked inner network NN(x)"""
        act = ACTIVATIONS[self.activation]
        z = x
        for layer in self.layers[:-1]:
            z = act(layer(z))
        return self.layers[-1](z)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = as_tensor(x)
        _check_finite(x, "ControllerNet")
        return x * self.network(x) * self.mask.to(DTYPE)

    def lipschitz_bound(self) -> float:
        """Product of the recorded per-layer spectral norms (activations are 1-Lipschitz)"""
        return float(torch.prod(self.layer_norms))


def _power_iteration(weight: torch.Tensor, u: torch.Tensor, iterations: int):
    v = None
    for _ in range(iterations):
        v = weight.T @ u
        v_norm = v.norm()
        if v_norm < SPECTRAL_GUARD:
            return u, None, 0.0
        v = v / v_norm
        w = weight @ v
        w_norm = w.norm()
        if w_norm < SPECTRAL_GUARD:
            return u, None, 0.0
        u = w / w_norm
    return u, v, float(u @ weight @ v)


@torch.no_grad()
def estimate_spectral_norms(net: ControllerNet, iterations: int = SERIALIZATION_POWER_ITERATIONS) -> List[float]:
    """Power-iteration estimates of each layer's top singular value, without mutating the net"""
    estimates = []
    for i, layer in enumerate(net.layers):
        _, _, sigma = _power_iteration(layer.weight, net.power_vector(i).clone(), iterations)
        estimates.append(sigma)
    return estimates


@torch.no_grad()
def spectral_normalize(net: ControllerNet, iterations: int = 1) -> ControllerNet:
    """
    Divide every weight matrix by its estimated top singular value.

    Power vectors persist on the net so that a single iteration per training
    step stays accurate (warm start). Degenerate layers (estimate below
    SPECTRAL_GUARD) are left unchanged.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    for i, layer in enumerate(net.layers):
        u, v, sigma = _power_iteration(layer.weight, net.power_vector(i), iterations)
        net.power_vector(i).copy_(u)
        if v is None or sigma < SPECTRAL_GUARD:
            net.layer_norms[i] = sigma
            continue
        layer.weight.div_(sigma)
        net.layer_norms[i] = 1.0
    return net


class PotentialNet(nn.Module):
    """
    Positive definite potential built on an input convex network.

    p(x) is convex because the hidden-to-hidden weights U_i stay entrywise
    nonnegative and the activation is convex and nondecreasing.
    """

    kind = "potential"

    def __init__(self, widths: Sequence[int], epsilon: float = 1e-3, exponent: float = 2.0,
                 activation: str = "softplus", smoothing: float = 0.1, seed: Optional[int] = None):
        super().__init__()
        widths = [int(w) for w in widths]
        if len(widths) < 2 or widths[-1] != 1:
            raise ValueError(f"Potential widths must end with a single output, got {widths}")
        if epsilon <= 0 or exponent <= 0:
            raise ValueError("epsilon and exponent must be positive")
        if activation not in ("softplus", "elu_plus"):
            raise ValueError(f"Activation '{activation}' is not convex and smooth")
        self.widths = widths
        self.epsilon = float(epsilon)
        self.exponent = float(exponent)
        self.activation = activation
        self.smoothing = float(smoothing)
        self.in_features = widths[0]

        d = widths[0]
        rng = _seeded(seed)
        try:
            self.input_layers = nn.ModuleList(
                nn.Linear(d, width, dtype=DTYPE) for width in widths[1:]
            )
            self.convex_layers = nn.ModuleList(
                nn.Linear(fan_in, fan_out, bias=False, dtype=DTYPE)
                for fan_in, fan_out in zip(widths[1:-1], widths[2:])
            )
        finally:
            rng.__exit__(None, None, None)
        with torch.no_grad():
            for layer in self.convex_layers:
                layer.weight.abs_()

    def hyperparameters(self) -> Dict:
        return {
            "widths": self.widths,
            "epsilon": self.epsilon,
            "exponent": self.exponent,
            "activation": self.activation,
            "smoothing": self.smoothing,
        }

    def _act(self, z: torch.Tensor) -> torch.Tensor:
        if self.activation == "softplus":
            return F.softplus(z)
        return F.elu(z) + 1.0

    def convex_core(self, x: torch.Tensor) -> torch.Tensor:
        """The input convex network p(x), shape (N,)"""
        z = self._act(self.input_layers[0](x))
        for input_layer, convex_layer in zip(self.input_layers[1:], self.convex_layers):
            z = self._act(convex_layer(z) + input_layer(x))
        return z.squeeze(-1)

    def floor(self, x: torch.Tensor) -> torch.Tensor:
        """ε‖x‖^p, differentiable at the origin for every exponent"""
        sq = (x ** 2).sum(-1)
        if self.exponent == 2.0:
            return self.epsilon * sq
        positive = sq > 0
        safe = torch.where(positive, sq, torch.ones_like(sq))
        return self.epsilon * torch.where(positive, safe ** (self.exponent / 2), torch.zeros_like(sq))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = as_tensor(x)
        _check_finite(x, "PotentialNet")
        p0 = self.convex_core(torch.zeros(1, x.shape[-1], dtype=DTYPE))
        return smooth_relu(self.convex_core(x) - p0, self.smoothing) + self.floor(x)

    @torch.no_grad()
    def clamp_convex_weights(self):
        """Project U_i back onto the nonnegative orthant after an optimizer step"""
        for layer in self.convex_layers:
            layer.weight.clamp_(min=0.0)


class ClassKNet(nn.Module):
    """Class-K function α(s) = ∫₀ˢ q(z) dz with q = ELU(network) + 1 > 0"""

    kind = "classk"

    def __init__(self, widths: Sequence[int] = (1, 10, 10, 1), quadrature_nodes: int = 32,
                 integrand: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
                 seed: Optional[int] = None):
        super().__init__()
        widths = [int(w) for w in widths]
        if widths[0] != 1 or widths[-1] != 1:
            raise ValueError(f"Class-K widths must start and end with 1, got {widths}")
        self.widths = widths
        self.quadrature_nodes = int(quadrature_nodes)
        self.integrand_override = integrand

        rng = _seeded(seed)
        try:
            self.layers = nn.ModuleList(
                nn.Linear(fan_in, fan_out, dtype=DTYPE)
                for fan_in, fan_out in zip(widths[:-1], widths[1:])
            )
        finally:
            rng.__exit__(None, None, None)

        nodes, weights = np.polynomial.legendre.leggauss(self.quadrature_nodes)
        self.register_buffer("nodes", torch.tensor((nodes + 1.0) / 2.0, dtype=DTYPE))
        self.register_buffer("weights", torch.tensor(weights / 2.0, dtype=DTYPE))

    def hyperparameters(self) -> Dict:
        return {"widths": self.widths, "quadrature_nodes": self.quadrature_nodes}

    def integrand(self, z: torch.Tensor) -> torch.Tensor:
        if self.integrand_override is not None:
            return self.integrand_override(z)
        h = z.unsqueeze(-1)
        for layer in self.layers[:-1]:
            h = F.relu(layer(h))
        return (F.elu(self.layers[-1](h)) + 1.0).squeeze(-1)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        """
        Evaluate α on a batch.

        Negative arguments give the odd extension -∫ₛ⁰ q, so the function can
        be applied to barrier values of states that left the safe region.
        """
        s = as_tensor(s)
        points = s.unsqueeze(-1) * self.nodes
        return s * (self.integrand(points) * self.weights).sum(-1)


def controller_eval(net: ControllerNet, x) -> torch.Tensor:
    return net(as_tensor(x))


def potential_eval(net: PotentialNet, x) -> torch.Tensor:
    x = as_tensor(x)
    single = x.dim() == 1
    value = net(x.unsqueeze(0) if single else x)
    return value[0] if single else value


def classk_eval(net: ClassKNet, s) -> torch.Tensor:
    """α(s) for s >= 0; negative arguments are rejected here"""
    s = as_tensor(s)
    if bool((s < 0).any()):
        raise ValueError(f"Class-K functions are evaluated on nonnegative arguments, got {s.min().item()}")
    return net(s)


MODEL_KINDS = {cls.kind: cls for cls in (ControllerNet, PotentialNet, ClassKNet)}


def model_to_dict(net: nn.Module, metadata: Optional[Dict] = None) -> Dict:
    """Versioned document with hyperparameters and row-major flattened tensors"""
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": net.kind,
        "hyperparameters": net.hyperparameters(),
        "tensors": {
            name: {"shape": list(tensor.shape), "values": tensor.detach().reshape(-1).tolist()}
            for name, tensor in net.state_dict().items()
        },
        "metadata": dict(metadata or {}),
    }
    if isinstance(net, ControllerNet):
        norms = estimate_spectral_norms(net, SERIALIZATION_POWER_ITERATIONS)
        doc["metadata"]["layer_spectral_norms"] = norms
        doc["metadata"]["lipschitz_bound"] = float(np.prod(norms))
    return doc


def model_from_dict(doc: Dict, expected_kind: Optional[str] = None,
                    expected_dim: Optional[int] = None) -> nn.Module:
    try:
        version = doc["format_version"]
        kind = doc["kind"]
        hyper = doc["hyperparameters"]
        tensors = doc["tensors"]
    except (KeyError, TypeError) as e:
        raise ModelFormatError(f"Model document is missing field {e}") from e
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"Unsupported model format version {version}")
    if kind not in MODEL_KINDS:
        raise ModelFormatError(f"Unknown model kind '{kind}'")
    if expected_kind is not None and kind != expected_kind:
        raise ModelFormatError(f"Expected a {expected_kind} model, found {kind}")

    net = MODEL_KINDS[kind](**hyper)
    state = net.state_dict()
    loaded = {}
    for name, reference in state.items():
        if name not in tensors:
            raise ModelFormatError(f"Model document has no tensor '{name}'")
        entry = tensors[name]
        if list(entry["shape"]) != list(reference.shape):
            raise ModelFormatError(
                f"Tensor '{name}' has shape {entry['shape']}, expected {list(reference.shape)}"
            )
        loaded[name] = torch.tensor(entry["values"], dtype=reference.dtype).reshape(reference.shape)
    net.load_state_dict(loaded)

    dim = net.widths[0]
    if expected_dim is not None and kind != "classk" and dim != expected_dim:
        raise ModelFormatError(f"{kind} model expects {dim}-dimensional states, system has {expected_dim}")
    return net


def save_model(net: nn.Module, filepath: str, metadata: Optional[Dict] = None):
    with open(filepath, "w") as f:
        json.dump(model_to_dict(net, metadata), f, indent=1)
    logger.info("Saved %s model to %s", net.kind, filepath)


def load_model(filepath: str, expected_kind: Optional[str] = None,
               expected_dim: Optional[int] = None) -> nn.Module:
    try:
        with open(filepath, "r") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"Cannot read model file {filepath}: {e}") from e
    return model_from_dict(doc, expected_kind=expected_kind, expected_dim=expected_dim)

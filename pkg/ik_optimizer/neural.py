"""Dense network engine with reverse-mode gradients, normalization and model files.

Layer l computes x_{l+1} = act_l(x_l @ W_l + b_l) with W_l of shape
(fan_in, fan_out). Inputs are batches of row vectors.
"""

from dataclasses import InitVar, dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple
import hashlib
import json
import logging

import numpy as np

from .chain_model import KinematicChain
from .config import Workspace
from .dataset import WorkspaceBounds

logger = logging.getLogger(__name__)

MODEL_FORMAT = "ik_optimizer.model"
MODEL_VERSION = 1
MIN_LAYER_WIDTH = 8
MAX_TANH_LAYERS = 3

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_K = 0.044715


class ModelFormatError(ValueError):
    """Raised for malformed model files and width mismatches"""
    pass


class TapeError(RuntimeError):
    """Raised when a gradient tape is replayed"""
    pass


class Activation(str, Enum):
    GELU = "GELU"
    TANH = "TANH"


class ModelKind(str, Enum):
    MLP = "mlp"
    GAN = "gan"


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation"""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_K * x ** 3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + _GELU_K * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * _GELU_C * (1.0 + 3.0 * _GELU_K * x ** 2)


def tanh_grad(x: np.ndarray) -> np.ndarray:
    return 1.0 - np.tanh(x) ** 2


# Activation tag -> (function, derivative), both taking the pre-activation
ACTIVATIONS = {
    Activation.GELU: (gelu, gelu_grad),
    Activation.TANH: (np.tanh, tanh_grad),
}


@dataclass
class DenseNet:
    """Fully connected network: GELU layers followed by a tail of 1 to 3 tanh layers"""

    layer_sizes: List[int]
    activation_tags: List[Activation]
    weights: List[np.ndarray] = field(default_factory=list)
    biases: List[np.ndarray] = field(default_factory=list)
    check_layout: InitVar[bool] = True

    def __post_init__(self, check_layout: bool):
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        self.activation_tags = [Activation(t) for t in self.activation_tags]
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ModelFormatError(f"Invalid layer sizes {self.layer_sizes}")
        if len(self.activation_tags) != len(self.layer_sizes) - 1:
            raise ModelFormatError(
                f"{len(self.activation_tags)} activation tags for {len(self.layer_sizes) - 1} layers")
        if check_layout:
            tail = 0
            for tag in reversed(self.activation_tags):
                if tag != Activation.TANH:
                    break
                tail += 1
            if not 1 <= tail <= MAX_TANH_LAYERS:
                raise ModelFormatError(f"Expected 1 to {MAX_TANH_LAYERS} trailing TANH layers, found {tail}")
            if any(t != Activation.GELU for t in self.activation_tags[:-tail]):
                raise ModelFormatError("Layers before the tanh tail must be GELU")

        shapes = self.weight_shapes
        if not self.weights:
            self.weights = [np.zeros(s) for s in shapes]
            self.biases = [np.zeros(s[1]) for s in shapes]
        else:
            self.weights = [np.asarray(w, dtype=float) for w in self.weights]
            self.biases = [np.asarray(b, dtype=float) for b in self.biases]
            if [w.shape for w in self.weights] != shapes or [b.shape for b in self.biases] != [(s[1],) for s in shapes]:
                raise ModelFormatError("Parameter shapes do not match the layer sizes")

    @property
    def weight_shapes(self) -> List[Tuple[int, int]]:
        return list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_parameters(self) -> int:
        return sum(i * o + o for i, o in self.weight_shapes)

    def initialize(self, rng_seed: int) -> "DenseNet":
        """Glorot-uniform weights, zero biases (in place)"""
        rng = np.random.default_rng(rng_seed)
        for l, (fan_in, fan_out) in enumerate(self.weight_shapes):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights[l] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            self.biases[l] = np.zeros(fan_out)
        return self

    def copy(self) -> "DenseNet":
        return DenseNet(list(self.layer_sizes), list(self.activation_tags),
                        [w.copy() for w in self.weights], [b.copy() for b in self.biases], check_layout=False)

    def flat_parameters(self) -> np.ndarray:
        """All parameters, layer by layer, weights (row-major) then biases"""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_flat_parameters(self, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.size != self.num_parameters:
            raise ModelFormatError(f"Expected {self.num_parameters} parameters, got {values.size}")
        offset = 0
        for l, (fan_in, fan_out) in enumerate(self.weight_shapes):
            self.weights[l] = values[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out).copy()
            offset += fan_in * fan_out
            self.biases[l] = values[offset:offset + fan_out].copy()
            offset += fan_out

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) and np.all(np.isfinite(b)) for w, b in zip(self.weights, self.biases))


def build_net(layer_sizes: Sequence[int], tanh_layers: int, rng_seed: Optional[int] = None) -> DenseNet:
    """DenseNet with the last tanh_layers layers TANH and the rest GELU"""
    n_layers = len(layer_sizes) - 1
    tags = [Activation.GELU] * (n_layers - tanh_layers) + [Activation.TANH] * tanh_layers
    net = DenseNet(list(layer_sizes), tags)
    if rng_seed is not None:
        net.initialize(rng_seed)
    return net


def param_digest(net: DenseNet) -> str:
    """sha256 of the little-endian parameter blob"""
    return hashlib.sha256(net.flat_parameters().astype("<f8").tobytes()).hexdigest()


# ------------------------------------------------------------------ #
# Forward / backward
# ------------------------------------------------------------------ #
class GradientTape:
    """Layer inputs and pre-activations of one forward pass; replayable once"""

    def __init__(self, net: DenseNet):
        self.net = net
        self.inputs: List[np.ndarray] = []
        self.pre_activations: List[np.ndarray] = []
        self.consumed = False

    def consume(self):
        if self.consumed:
            raise TapeError("Gradient tape was already consumed by a backward pass")
        self.consumed = True


@dataclass
class Gradients:
    """Parameter gradients (same layout as the net) and the input gradient"""
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    inputs: np.ndarray

    def global_norm(self) -> float:
        total = sum(float(np.sum(w * w)) for w in self.weights) + sum(float(np.sum(b * b)) for b in self.biases)
        return float(np.sqrt(total))

    def scaled(self, factor: float) -> "Gradients":
        return Gradients([w * factor for w in self.weights], [b * factor for b in self.biases], self.inputs * factor)

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients([a + b for a, b in zip(self.weights, other.weights)],
                         [a + b for a, b in zip(self.biases, other.biases)],
                         self.inputs + other.inputs)

    def clipped(self, max_norm: Optional[float]) -> "Gradients":
        """Rescale to max_norm when the global norm exceeds it"""
        if max_norm is None:
            return self
        norm = self.global_norm()
        if norm > max_norm:
            return self.scaled(max_norm / norm)
        return self


def forward(net: DenseNet, inputs: np.ndarray) -> Tuple[np.ndarray, GradientTape]:
    """Run the net on a batch (N, input_size)

    Returns:
        Tuple of (outputs (N, output_size), tape for backward)
    """
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_size:
        raise ModelFormatError(f"Input width {x.shape[-1]} does not match the network input size {net.input_size}")
    tape = GradientTape(net)
    for w, b, tag in zip(net.weights, net.biases, net.activation_tags):
        tape.inputs.append(x)
        a = x @ w + b
        tape.pre_activations.append(a)
        x = ACTIVATIONS[tag][0](a)
    return x, tape


def backward(net: DenseNet, tape: GradientTape, output_grad: np.ndarray) -> Gradients:
    """Reverse-mode gradients of sum(output_grad * outputs) for the taped pass"""
    if tape.net is not net:
        raise TapeError("Gradient tape belongs to another network")
    tape.consume()
    g = np.asarray(output_grad, dtype=float)
    if g.shape != tape.pre_activations[-1].shape:
        raise ModelFormatError(f"Output gradient shape {g.shape} does not match {tape.pre_activations[-1].shape}")
    n_layers = len(net.weights)
    grad_w: List[np.ndarray] = [None] * n_layers
    grad_b: List[np.ndarray] = [None] * n_layers
    for l in reversed(range(n_layers)):
        d_a = g * ACTIVATIONS[net.activation_tags[l]][1](tape.pre_activations[l])
        grad_w[l] = tape.inputs[l].T @ d_a
        grad_b[l] = d_a.sum(axis=0)
        g = d_a @ net.weights[l].T
    return Gradients(grad_w, grad_b, g)


class AdamOptimizer:
    """First/second-moment adaptive gradient steps on a DenseNet (in place)"""

    def __init__(self, net: DenseNet, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.net = net
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p) for p in net.weights + net.biases]
        self._v = [np.zeros_like(p) for p in net.weights + net.biases]

    def step(self, grads: Gradients):
        self.t += 1
        if self.lr == 0:
            return
        n = len(self.net.weights)
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for i, g in enumerate(grads.weights + grads.biases):
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            update = self.lr * (self._m[i] / correction1) / (np.sqrt(self._v[i] / correction2) + self.eps)
            if i < n:
                self.net.weights[i] = self.net.weights[i] - update
            else:
                self.net.biases[i - n] = self.net.biases[i - n] - update


# ------------------------------------------------------------------ #
# Normalization
# ------------------------------------------------------------------ #
@dataclass
class Normalizer:
    """Affine maps between physical values and [-1, 1]

    Position bounds come from the dataset workspace; quaternion components
    use [-1, 1] unchanged.
    """
    pose_bounds: np.ndarray     # (7, 2) min, max
    joint_limits: np.ndarray    # (dof, 2) lower, upper

    def __post_init__(self):
        self.pose_bounds = np.asarray(self.pose_bounds, dtype=float).reshape(7, 2)
        self.joint_limits = np.asarray(self.joint_limits, dtype=float).reshape(-1, 2)
        if np.any(self.pose_bounds[:, 0] >= self.pose_bounds[:, 1]) or \
                np.any(self.joint_limits[:, 0] >= self.joint_limits[:, 1]):
            raise ModelFormatError("Normalizer bounds must satisfy min < max")

    @classmethod
    def from_chain(cls, chain: KinematicChain, bounds: WorkspaceBounds) -> "Normalizer":
        pose_bounds = np.array([[lo, hi] for lo, hi in zip(bounds.min, bounds.max)] + [[-1.0, 1.0]] * 4)
        return cls(pose_bounds, np.stack([chain.lower, chain.upper], axis=1))

    @property
    def dof(self) -> int:
        return self.joint_limits.shape[0]

    @property
    def joint_half_range(self) -> np.ndarray:
        """d(physical joint)/d(normalized joint)"""
        return (self.joint_limits[:, 1] - self.joint_limits[:, 0]) / 2.0

    def normalize_pose(self, poses: np.ndarray) -> np.ndarray:
        lo, hi = self.pose_bounds[:, 0], self.pose_bounds[:, 1]
        return 2.0 * (np.asarray(poses, dtype=float) - lo) / (hi - lo) - 1.0

    def denormalize_pose(self, values: np.ndarray) -> np.ndarray:
        lo, hi = self.pose_bounds[:, 0], self.pose_bounds[:, 1]
        return lo + (np.asarray(values, dtype=float) + 1.0) / 2.0 * (hi - lo)

    def normalize_joints(self, configs: np.ndarray) -> np.ndarray:
        lo, hi = self.joint_limits[:, 0], self.joint_limits[:, 1]
        return 2.0 * (np.asarray(configs, dtype=float) - lo) / (hi - lo) - 1.0

    def denormalize_joints(self, values: np.ndarray) -> np.ndarray:
        """Map [-1, 1] onto the joint limits; results are clipped to the limits"""
        lo, hi = self.joint_limits[:, 0], self.joint_limits[:, 1]
        return np.clip(lo + (np.asarray(values, dtype=float) + 1.0) / 2.0 * (hi - lo), lo, hi)

    def to_dict(self) -> dict:
        return {"pose_bounds": self.pose_bounds.tolist(), "joint_limits": self.joint_limits.tolist()}


# ------------------------------------------------------------------ #
# Layout presets
# ------------------------------------------------------------------ #
# Hidden layer widths at full scale
MLP_HIDDEN = {
    Workspace.SMALL: [3380, 2250, 3240, 2270, 1840, 30, 60, 220],
    Workspace.FULL: [2200, 2400, 2400, 1900, 250, 220, 30, 380],
}
MLP_TANH_LAYERS = {Workspace.SMALL: 3, Workspace.FULL: 3}

GAN_HIDDEN = {
    Workspace.SMALL: [790, 990, 3120, 1630, 300, 1660, 730, 540],
    Workspace.FULL: [1180, 1170, 2500, 1290, 700, 970, 440, 770],
}
GAN_NOISE_DIM = {Workspace.SMALL: 8, Workspace.FULL: 10}
GAN_TANH_LAYERS = {Workspace.SMALL: 3, Workspace.FULL: 2}


def scale_widths(widths: Sequence[int], width_factor: float) -> List[int]:
    if width_factor <= 0:
        raise ValueError("Width factor must be positive")
    return [max(MIN_LAYER_WIDTH, int(round(width_factor * w))) for w in widths]


def mlp_layout(workspace, dof: int, width_factor: float = 0.1) -> Tuple[List[int], int]:
    """Layer sizes and tanh layer count of the single-solution network"""
    workspace = Workspace(workspace)
    return [7] + scale_widths(MLP_HIDDEN[workspace], width_factor) + [dof], MLP_TANH_LAYERS[workspace]


def gan_layout(workspace, dof: int, width_factor: float = 0.1) -> Tuple[List[int], int, int]:
    """Layer sizes, tanh layer count and noise size of the multi-solution network"""
    workspace = Workspace(workspace)
    noise_dim = GAN_NOISE_DIM[workspace]
    sizes = [7 + noise_dim] + scale_widths(GAN_HIDDEN[workspace], width_factor) + [dof]
    return sizes, GAN_TANH_LAYERS[workspace], noise_dim


def mlp_preset(workspace, dof: int, width_factor: float = 0.1, rng_seed: int = 0) -> DenseNet:
    sizes, tanh_layers = mlp_layout(workspace, dof, width_factor)
    return build_net(sizes, tanh_layers, rng_seed)


def gan_preset(workspace, dof: int, width_factor: float = 0.1, rng_seed: int = 0) -> Tuple[DenseNet, int]:
    sizes, tanh_layers, noise_dim = gan_layout(workspace, dof, width_factor)
    return build_net(sizes, tanh_layers, rng_seed), noise_dim


# ------------------------------------------------------------------ #
# Model
# ------------------------------------------------------------------ #
@dataclass
class IKModel:
    """A trained network together with its normalization and provenance"""

    net: DenseNet
    normalizer: Normalizer
    kind: ModelKind = ModelKind.MLP
    noise_dim: int = 0
    chain_hash: str = ""
    rng_seed: int = 0

    def __post_init__(self):
        self.kind = ModelKind(self.kind)
        if self.kind == ModelKind.MLP and self.noise_dim != 0:
            raise ModelFormatError("Single-solution models take no noise input")
        if self.net.input_size != 7 + self.noise_dim:
            raise ModelFormatError(
                f"Network input size {self.net.input_size} does not match 7 + noise_dim {self.noise_dim}")
        if self.net.output_size != self.normalizer.dof:
            raise ModelFormatError(
                f"Network output size {self.net.output_size} does not match {self.normalizer.dof} joints")

    @property
    def dof(self) -> int:
        return self.net.output_size

    def network_inputs(self, poses: np.ndarray, noise: Optional[np.ndarray] = None) -> np.ndarray:
        x = self.normalizer.normalize_pose(np.atleast_2d(poses))
        if self.noise_dim == 0:
            return x
        if noise is None:
            noise = np.zeros((x.shape[0], self.noise_dim))
        noise = np.atleast_2d(noise)
        if noise.shape != (x.shape[0], self.noise_dim):
            raise ModelFormatError(f"Noise shape {noise.shape} does not match ({x.shape[0]}, {self.noise_dim})")
        return np.hstack([x, noise])

    def predict(self, poses: np.ndarray, noise: Optional[np.ndarray] = None) -> np.ndarray:
        """Joint configurations (N, dof) for poses (N, 7); noise defaults to zeros"""
        out, _ = forward(self.net, self.network_inputs(poses, noise))
        return self.normalizer.denormalize_joints(out)

    def sample(self, pose: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
        """count solutions for one pose, noise uniform in [-1, 1]"""
        if count < 1:
            raise ValueError("Sample count must be at least 1")
        poses = np.repeat(np.atleast_2d(pose), count, axis=0)
        if self.noise_dim == 0:
            return self.predict(poses)
        return self.predict(poses, rng.uniform(-1.0, 1.0, size=(count, self.noise_dim)))


def _manifest(model: IKModel) -> Dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "kind": model.kind.value,
        "layer_sizes": model.net.layer_sizes,
        "activation_tags": [t.value for t in model.net.activation_tags],
        "noise_dim": model.noise_dim,
        "chain_hash": model.chain_hash,
        "rng_seed": model.rng_seed,
        "normalizer": model.normalizer.to_dict(),
        "parameter_count": model.net.num_parameters,
    }


def save_model(model: IKModel, path: str):
    """Write a JSON manifest line followed by the little-endian float64 parameter blob"""
    header = json.dumps(_manifest(model), sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    with open(path, "wb") as f:
        f.write(header)
        f.write(model.net.flat_parameters().astype("<f8").tobytes())
    logger.info("Saved %s model (%d parameters) to %s", model.kind.value, model.net.num_parameters, path)


def load_model(path: str) -> IKModel:
    with open(path, "rb") as f:
        data = f.read()
    newline = data.find(b"\n")
    if newline < 0:
        raise ModelFormatError(f"Truncated model file {path}: no manifest")
    try:
        manifest = json.loads(data[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"Malformed model manifest in {path}: {e}")
    if manifest.get("format") != MODEL_FORMAT or manifest.get("version") != MODEL_VERSION:
        raise ModelFormatError(
            f"Unsupported model file {path}: format {manifest.get('format')!r} version {manifest.get('version')!r}, "
            f"expected {MODEL_FORMAT!r} version {MODEL_VERSION}")
    try:
        net = DenseNet(manifest["layer_sizes"], manifest["activation_tags"], check_layout=False)
        blob = data[newline + 1:]
        if len(blob) != 8 * net.num_parameters:
            raise ModelFormatError(
                f"Truncated model file {path}: {len(blob)} parameter bytes, expected {8 * net.num_parameters}")
        net.set_flat_parameters(np.frombuffer(blob, dtype="<f8").astype(float))
        normalizer = Normalizer(np.array(manifest["normalizer"]["pose_bounds"]),
                                np.array(manifest["normalizer"]["joint_limits"]))
        return IKModel(net, normalizer, manifest["kind"], manifest["noise_dim"],
                       manifest["chain_hash"], manifest["rng_seed"])
    except (KeyError, TypeError) as e:
        raise ModelFormatError(f"Malformed model manifest in {path}: {e}")

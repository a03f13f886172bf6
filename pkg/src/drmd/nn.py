"""Dense feed-forward networks with hand-written backpropagation.

Only what the agent and the supervised baselines need: affine layers with
LeakyReLU/ReLU/Softmax/Identity activations, inverted dropout on hidden
layers, SGD and Adam, global-norm gradient clipping, and an npz checkpoint.

Weights are stored ``(out, in)`` and inputs are row-major batches, so a layer
computes ``z = x @ W.T + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ContractViolation, TrainingError

LEAKY_SLOPE = 0.01
CHECKPOINT_VERSION = 1


class Activation(str, Enum):
    LEAKY_RELU = "leaky_relu"
    RELU = "relu"
    SOFTMAX = "softmax"
    IDENTITY = "identity"


@dataclass
class DenseLayer:
    weights: np.ndarray
    biases: np.ndarray
    activation: Activation = Activation.IDENTITY
    dropout_rate: float = 0.0

    def __post_init__(self):
        self.activation = Activation(self.activation)
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ContractViolation(f"dropout_rate {self.dropout_rate} outside [0, 1]")
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ContractViolation("bias length must equal the weight matrix row count")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class ForwardCache:
    """Everything :meth:`Network.backward` needs from one forward pass."""

    network_id: int
    version: int
    inputs: list  # input to each layer
    preacts: list  # z of each layer
    masks: list  # dropout mask (already scaled) or None
    output: np.ndarray
    squeeze: bool


class Network:
    """An ordered stack of :class:`DenseLayer`."""

    def __init__(self, layers: Sequence[DenseLayer]):
        if not layers:
            raise ContractViolation("a network needs at least one layer")
        for k, (a, b) in enumerate(zip(layers, layers[1:])):
            if a.out_dim != b.in_dim:
                raise ContractViolation(f"layer {k} outputs {a.out_dim} but layer {k + 1} expects {b.in_dim}")
        for layer in layers[:-1]:
            if layer.activation is Activation.SOFTMAX:
                raise ContractViolation("softmax is only allowed on the final layer")
        self.layers = list(layers)
        # bumped on every parameter update so stale caches can be detected
        self.version = 0

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dtype(self):
        return self.layers[0].weights.dtype

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list ``[W0, b0, W1, b1, ...]``; gradients use the same order."""
        params = []
        for layer in self.layers:
            params.extend((layer.weights, layer.biases))
        return params

    def copy(self) -> "Network":
        net = Network([
            DenseLayer(l.weights.copy(), l.biases.copy(), l.activation, l.dropout_rate) for l in self.layers
        ])
        return net

    def astype(self, dtype) -> "Network":
        return Network([
            DenseLayer(l.weights.astype(dtype), l.biases.astype(dtype), l.activation, l.dropout_rate)
            for l in self.layers
        ])

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None):
        """Run the network on a vector or a batch of row vectors.

        In train mode each hidden unit is zeroed with probability
        ``dropout_rate`` and survivors are scaled by ``1/(1-dropout_rate)``;
        eval mode applies no dropout at all. Returns ``(output, cache)``.
        """
        x = np.asarray(x, dtype=self.dtype)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ContractViolation(f"expected input of width {self.input_dim}, got shape {x.shape}")
        if train and rng is None:
            raise ContractViolation("train-mode forward needs an rng for dropout")

        inputs, preacts, masks = [], [], []
        h = x
        last = len(self.layers) - 1
        for k, layer in enumerate(self.layers):
            inputs.append(h)
            z = h @ layer.weights.T + layer.biases
            preacts.append(z)
            h = _activate(z, layer.activation)
            mask = None
            if train and k < last and layer.dropout_rate > 0.0:
                p = layer.dropout_rate
                if p >= 1.0:
                    mask = np.zeros_like(h)
                else:
                    keep = rng.random(h.shape) >= p
                    mask = keep.astype(h.dtype) / h.dtype.type(1.0 - p)
                h = h * mask
            masks.append(mask)

        cache = ForwardCache(id(self), self.version, inputs, preacts, masks, h, squeeze)
        return (h[0] if squeeze else h), cache

    def __call__(self, x, train: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        return self.forward(x, train=train, rng=rng)[0]

    def backward(self, cache: ForwardCache | None, output_gradient, from_logits: bool = False) -> list[np.ndarray]:
        """Gradients of ``sum(output_gradient * output)`` w.r.t. every parameter.

        With ``from_logits=True`` the supplied gradient is taken to be w.r.t.
        the final layer's pre-activation, which is how softmax heads feed
        cross-entropy and log-probability gradients without dividing by
        tiny probabilities.
        """
        if cache is None:
            raise ContractViolation("backward needs the cache from a matching forward call")
        if cache.network_id != id(self) or cache.version != self.version:
            raise ContractViolation("stale cache: parameters changed since the forward pass")
        g = np.asarray(output_gradient, dtype=self.dtype)
        if cache.squeeze and g.ndim == 1:
            g = g[None, :]
        if g.shape != cache.output.shape:
            raise ContractViolation(f"output gradient shape {g.shape} != output shape {cache.output.shape}")

        grads: list[np.ndarray] = [None] * (2 * len(self.layers))
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            if cache.masks[k] is not None:
                g = g * cache.masks[k]
            z = cache.preacts[k]
            if k == len(self.layers) - 1 and from_logits:
                dz = g
            else:
                dz = _activation_backward(z, g, layer.activation)
            grads[2 * k] = dz.T @ cache.inputs[k]
            grads[2 * k + 1] = dz.sum(axis=0)
            if k > 0:
                g = dz @ layer.weights
        return grads

    def apply_update(self, deltas: Sequence[np.ndarray]) -> None:
        """Add ``deltas`` to the parameters in place."""
        for p, d in zip(self.parameters(), deltas):
            p += d.astype(p.dtype, copy=False)
        self.version += 1


def _activate(z: np.ndarray, act: Activation) -> np.ndarray:
    if act is Activation.LEAKY_RELU:
        return np.where(z > 0, z, z * z.dtype.type(LEAKY_SLOPE))
    if act is Activation.RELU:
        return np.maximum(z, 0)
    if act is Activation.SOFTMAX:
        return softmax(z)
    return z


def _activation_backward(z: np.ndarray, g: np.ndarray, act: Activation) -> np.ndarray:
    if act is Activation.LEAKY_RELU:
        return np.where(z > 0, g, g * g.dtype.type(LEAKY_SLOPE))
    if act is Activation.RELU:
        return np.where(z > 0, g, 0)
    if act is Activation.SOFTMAX:
        s = softmax(z)
        return s * (g - np.sum(g * s, axis=-1, keepdims=True))
    return g


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def build_network(
    input_dim: int,
    hidden_sizes: Sequence[int],
    output_dim: int,
    rng: np.random.Generator,
    hidden_activation: Activation = Activation.LEAKY_RELU,
    output_activation: Activation = Activation.IDENTITY,
    dropout: float = 0.0,
    dtype=np.float32,
) -> Network:
    """Kaiming-uniform fan-in init for hidden layers, LeCun-uniform for the head, zero biases."""
    dims = [input_dim, *hidden_sizes, output_dim]
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        is_out = k == len(dims) - 2
        act = Activation(output_activation if is_out else hidden_activation)
        if is_out:
            gain = 1.0
        elif act is Activation.LEAKY_RELU:
            gain = np.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2))
        else:
            gain = np.sqrt(2.0)
        bound = gain * np.sqrt(3.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
        layers.append(DenseLayer(w, np.zeros(fan_out, dtype=dtype), act, 0.0 if is_out else dropout))
    return Network(layers)


def global_norm(gradients: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in gradients)))


def clip_global_norm(gradients: Sequence[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ContractViolation("max_norm must be positive")
    norm = global_norm(gradients)
    if norm <= max_norm:
        return list(gradients)
    scale = max_norm / norm
    return [g * g.dtype.type(scale) for g in gradients]


@dataclass
class OptimizerState:
    """SGD or Adam state for one network.

    Adam uses bias-corrected moments and adds ``adam_epsilon`` to
    ``sqrt(v_hat)`` in the denominator.
    """

    kind: str = "adam"
    learning_rate: float = 2.5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-5
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    step_count: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ContractViolation(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate < 0:
            raise ContractViolation("learning_rate must be non-negative")

    def reset(self) -> None:
        self.first_moment, self.second_moment, self.step_count = [], [], 0


def optimizer_step(state: OptimizerState, net: Network, gradients: Sequence[np.ndarray]) -> None:
    """Apply one update in place to ``net`` and ``state``."""
    params = net.parameters()
    if len(gradients) != len(params) or any(g.shape != p.shape for g, p in zip(gradients, params)):
        raise ContractViolation("gradients do not match the network's parameter shapes")
    for g in gradients:
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient")
    state.step_count += 1
    lr = state.learning_rate
    if state.kind == "sgd":
        net.apply_update([-lr * g for g in gradients])
        return
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    b1, b2, eps, t = state.adam_beta1, state.adam_beta2, state.adam_epsilon, state.step_count
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    deltas = []
    for m, v, g in zip(state.first_moment, state.second_moment, gradients):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        deltas.append((-lr / c1) * m / (np.sqrt(v / c2) + eps))
    net.apply_update(deltas)


# -- checkpoints ---------------------------------------------------------------
#
# A checkpoint is an ``.npz`` archive:
#   header            JSON string: {"format_version": 1, "networks": {...}, "meta": {...}}
#   <name>.<k>.weights  float array (out, in), row-major
#   <name>.<k>.biases   float array (out,)
# header["networks"][name] lists, per layer k, its in/out dims, activation and
# dropout rate. ``meta`` is free-form (the agent stores policy kind, config
# digest and origin month there).

def save_checkpoint(path, networks: dict[str, Network], meta: dict | None = None) -> None:
    arrays = {}
    layout = {}
    for name, net in networks.items():
        layout[name] = [
            {"in": l.in_dim, "out": l.out_dim, "activation": l.activation.value, "dropout": l.dropout_rate}
            for l in net.layers
        ]
        for k, l in enumerate(net.layers):
            arrays[f"{name}.{k}.weights"] = np.ascontiguousarray(l.weights)
            arrays[f"{name}.{k}.biases"] = l.biases
    header = {"format_version": CHECKPOINT_VERSION, "networks": layout, "meta": meta or {}}
    arrays["header"] = np.array(json.dumps(header, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict[str, Network], dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ContractViolation(f"unsupported checkpoint version {header.get('format_version')}")
        networks = {}
        for name, specs in header["networks"].items():
            layers = []
            for k, spec in enumerate(specs):
                w = data[f"{name}.{k}.weights"]
                if w.shape != (spec["out"], spec["in"]):
                    raise ContractViolation(f"checkpoint layer {name}.{k} has shape {w.shape}")
                layers.append(DenseLayer(w.copy(), data[f"{name}.{k}.biases"].copy(), spec["activation"], spec["dropout"]))
            networks[name] = Network(layers)
    return networks, header["meta"]

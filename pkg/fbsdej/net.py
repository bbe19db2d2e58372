"""Feedforward networks on a flat parameter vector, gradients and Adam.

All trainable numbers of the deep solver live in one float64 vector `theta`:
the scalar y0 first, then the Z-networks, then the U-kernel networks. Each
weight and bias is a named slot (offset, shape) into that vector, so the
optimizer works on theta directly and the tape maps leaf adjoints back to
their slots.
"""
import json
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from fbsdej import tape as ops
from fbsdej.exceptions import DivergenceError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh")
NETWORK_MODES = ("per_step", "shared")
CHECKPOINT_FORMAT = "fbsdej-params"
CHECKPOINT_VERSION = 1
# Std multiplier of each Z/U net's output layer, so an untrained policy
# starts close to Z = 0, U = 0.
FINAL_LAYER_SCALE = 0.1


# ─── Shapes ─────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class MLPShape:
    input_dim: int
    hidden_dims: tuple
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ValueError("An MLP needs at least one hidden layer")
        if min((self.input_dim, self.output_dim) + self.hidden_dims) < 1:
            raise ValueError(f"Layer widths must be positive, got {self.layer_dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"Unknown activation '{self.activation}', expected one of {ACTIVATIONS}")

    @property
    def layer_dims(self) -> tuple:
        return (int(self.input_dim),) + self.hidden_dims + (int(self.output_dim),)

    @property
    def parameter_count(self) -> int:
        dims = self.layer_dims
        return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))

    def to_dict(self) -> dict:
        return {"input_dim": int(self.input_dim), "hidden_dims": list(self.hidden_dims),
                "output_dim": int(self.output_dim), "activation": self.activation}


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture shared by every Z-network and U-kernel network.

    hidden_dims=None means two hidden layers of width d + 10. In `shared` mode
    a single time-conditioned pair replaces the N per-step pairs and every
    input gains the time coordinate in front.
    """

    hidden_dims: Optional[tuple] = None
    activation: str = "relu"
    network_mode: str = "per_step"

    def __post_init__(self):
        if self.network_mode not in NETWORK_MODES:
            raise ValueError(f"Unknown network mode '{self.network_mode}', expected one of {NETWORK_MODES}")

    def hidden_for(self, d: int) -> tuple:
        return tuple(self.hidden_dims) if self.hidden_dims else (d + 10, d + 10)

    def z_shape(self, d: int) -> MLPShape:
        extra = 1 if self.network_mode == "shared" else 0
        return MLPShape(d + 1 + extra, self.hidden_for(d), d, self.activation)

    def u_shape(self, d: int) -> MLPShape:
        extra = 1 if self.network_mode == "shared" else 0
        return MLPShape(d + 2 + extra, self.hidden_for(d), 1, self.activation)


@dataclass(frozen=True)
class Slot:
    name: str
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def build_layout(z_shape: MLPShape, u_shape: MLPShape, nets: int):
    """Slots in storage order: y0, z-nets 0..nets-1, u-nets 0..nets-1."""
    slots = [Slot("y0", 0, ())]
    offset = 1
    for kind, shape in (("z", z_shape), ("u", u_shape)):
        dims = shape.layer_dims
        for n in range(nets):
            for layer in range(len(dims) - 1):
                for entry, entry_shape in (("W", (dims[layer], dims[layer + 1])), ("b", (dims[layer + 1],))):
                    slot = Slot(f"{kind}.{n}.{layer}.{entry}", offset, entry_shape)
                    slots.append(slot)
                    offset += slot.size
    return slots, offset


# ─── Parameters ─────────────────────────────────────────────────────────────

class ParamSet:
    """Trainable parameters: y0 plus the Z- and U-kernel networks."""

    def __init__(self, theta, z_shape: MLPShape, u_shape: MLPShape, steps: int,
                 network_mode: str = "per_step", seed: int = 0):
        if network_mode not in NETWORK_MODES:
            raise ValueError(f"Unknown network mode '{network_mode}'")
        self.z_shape = z_shape
        self.u_shape = u_shape
        self.steps = int(steps)
        self.network_mode = network_mode
        self.seed = int(seed)
        self.slots, size = build_layout(z_shape, u_shape, self.net_count)
        self._by_name = {slot.name: slot for slot in self.slots}
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (size,):
            raise ValueError(f"Parameter vector has shape {theta.shape}, layout needs ({size},)")
        self.theta = theta

    def __repr__(self):
        return f"<ParamSet d={self.dim} steps={self.steps} mode={self.network_mode} size={self.size}>"

    @property
    def size(self) -> int:
        return self.theta.size

    @property
    def dim(self) -> int:
        return self.z_shape.output_dim

    @property
    def net_count(self) -> int:
        return 1 if self.network_mode == "shared" else self.steps

    @property
    def time_input(self) -> bool:
        return self.network_mode == "shared"

    @property
    def activation(self) -> str:
        return self.z_shape.activation

    @property
    def y0(self) -> float:
        return float(self.theta[0])

    @y0.setter
    def y0(self, value):
        self.theta[0] = float(value)

    def view(self, name: str) -> np.ndarray:
        slot = self._by_name[name]
        return self.theta[slot.offset:slot.offset + slot.size].reshape(slot.shape)

    def _net_index(self, n: int) -> int:
        if not 0 <= n < self.steps:
            raise IndexError(f"Time step {n} outside 0..{self.steps - 1}")
        return 0 if self.time_input else n

    def _layers(self, kind, n, fetch):
        k = self._net_index(n)
        count = len((self.z_shape if kind == "z" else self.u_shape).layer_dims) - 1
        return [(fetch(f"{kind}.{k}.{layer}.W"), fetch(f"{kind}.{k}.{layer}.b")) for layer in range(count)]

    def z_layers(self, n: int):
        return self._layers("z", n, self.view)

    def u_layers(self, n: int):
        return self._layers("u", n, self.view)

    def block(self, kind: str, n: int) -> slice:
        """Range of theta occupied by one network."""
        k = self._net_index(n)
        names = [s for s in self.slots if s.name.startswith(f"{kind}.{k}.")]
        return slice(names[0].offset, names[-1].offset + names[-1].size)

    def locate(self, index: int) -> tuple:
        """Map a flat index to (net kind, net index, layer, entry, position)."""
        for slot in self.slots:
            if slot.offset <= index < slot.offset + max(slot.size, 1):
                if slot.name == "y0":
                    return ("y0", None, None, None, ())
                kind, net, layer, entry = slot.name.split(".")
                position = np.unravel_index(index - slot.offset, slot.shape)
                return (kind, int(net), int(layer), entry, tuple(int(p) for p in position))
        raise IndexError(f"Flat index {index} outside parameter vector of size {self.size}")

    def copy(self) -> "ParamSet":
        return ParamSet(self.theta.copy(), self.z_shape, self.u_shape, self.steps, self.network_mode, self.seed)

    def with_theta(self, theta) -> "ParamSet":
        return ParamSet(np.array(theta, dtype=float), self.z_shape, self.u_shape, self.steps,
                        self.network_mode, self.seed)

    def bind(self, tape: ops.Tape) -> "BoundParams":
        return BoundParams(self, tape)


class BoundParams:
    """A ParamSet whose slots are leaves of one tape."""

    def __init__(self, params: ParamSet, tape: ops.Tape):
        self.params = params
        self.tape = tape
        self._tensors = {slot.name: tape.watch(params.view(slot.name), slot.offset) for slot in params.slots}
        tape.param_size = max(tape.param_size, params.size)

    @property
    def time_input(self) -> bool:
        return self.params.time_input

    @property
    def activation(self) -> str:
        return self.params.activation

    @property
    def steps(self) -> int:
        return self.params.steps

    @property
    def y0(self) -> ops.Tensor:
        return self._tensors["y0"]

    def z_layers(self, n: int):
        return self.params._layers("z", n, self._tensors.__getitem__)

    def u_layers(self, n: int):
        return self.params._layers("u", n, self._tensors.__getitem__)


def init_params(shape_config: NetworkConfig, d: int, N: int, seed: int, y0: float = 0.0) -> ParamSet:
    """He initialisation (variance 2/fan_in) for ReLU hidden layers.

    tanh hidden layers use variance 1/fan_in. The final affine layer uses
    std FINAL_LAYER_SCALE/sqrt(fan_in): the stiff exp driver of example 1
    overflows under an explicit step once Y drifts a few units from the
    terminal value. Biases start at zero.
    """
    if int(d) < 1 or int(N) < 1:
        raise ValueError(f"Need d >= 1 and N >= 1, got d={d}, N={N}")
    z_shape, u_shape = shape_config.z_shape(int(d)), shape_config.u_shape(int(d))
    nets = 1 if shape_config.network_mode == "shared" else int(N)
    slots, size = build_layout(z_shape, u_shape, nets)
    theta = np.zeros(size)
    theta[0] = float(y0)

    rng = np.random.default_rng(int(seed))
    hidden_gain = 2.0 if shape_config.activation == "relu" else 1.0
    for slot in slots:
        if slot.name == "y0" or not slot.name.endswith(".W"):
            continue
        kind, _, layer, _ = slot.name.split(".")
        last = int(layer) == len((z_shape if kind == "z" else u_shape).layer_dims) - 2
        fan_in = slot.shape[0]
        std = FINAL_LAYER_SCALE / np.sqrt(fan_in) if last else np.sqrt(hidden_gain / fan_in)
        theta[slot.offset:slot.offset + slot.size] = rng.normal(0.0, std, slot.size)
    return ParamSet(theta, z_shape, u_shape, N, shape_config.network_mode, seed)


# ─── Forward ────────────────────────────────────────────────────────────────

def activate(h, activation: str):
    if activation == "relu":
        return ops.relu(h)
    if activation == "tanh":
        return ops.tanh(h)
    raise ValueError(f"Unknown activation '{activation}'")


def mlp_forward(layers: Sequence, inputs, activation: str = "relu"):
    """Hidden layers with activation, final layer affine.

    `layers` is a list of (W, b) pairs. With tape-bound pairs (see
    ParamSet.bind) every operation is recorded on that tape.
    """
    fan_in = np.shape(ops.value_of(layers[0][0]))[0]
    if np.shape(ops.value_of(inputs))[-1] != fan_in:
        raise ValueError(f"Input has {np.shape(ops.value_of(inputs))[-1]} features, network expects {fan_in}")
    h = inputs
    for i, (weight, bias) in enumerate(layers):
        h = ops.affine(h, weight, bias)
        if i < len(layers) - 1:
            h = activate(h, activation)
    return h


def mlp_forward_marks(layers: Sequence, features, marks, activation: str = "relu"):
    """Scalar-output net on (features, e) for many marks per row.

    features: [M, p]; marks: [M, J] constants. The last input coordinate is
    the mark, so the first affine layer is split into a per-row part and a
    rank-one mark part instead of repeating the features J times.
    Returns [M, J].
    """
    weight, bias = layers[0]
    fan_in = np.shape(ops.value_of(weight))[0]
    rows = np.shape(ops.value_of(features))[0]
    if np.shape(ops.value_of(features))[-1] + 1 != fan_in:
        raise ValueError(f"Features plus mark give {np.shape(ops.value_of(features))[-1] + 1} inputs, "
                         f"network expects {fan_in}")
    marks = np.broadcast_to(np.asarray(marks, dtype=float), (rows, np.shape(marks)[-1]))
    width = np.shape(ops.value_of(weight))[1]

    base = ops.affine(features, ops.getitem(weight, slice(0, fan_in - 1)), bias)
    mark_row = ops.reshape(ops.getitem(weight, fan_in - 1), (1, 1, width))
    h = ops.reshape(base, (rows, 1, width)) + marks[:, :, None] * mark_row
    for weight, bias in layers[1:]:
        h = ops.affine(activate(h, activation), weight, bias)
    return ops.reshape(h, (rows, marks.shape[1]))


# ─── Gradient and optimiser ─────────────────────────────────────────────────

def grad(loss_node, tape: ops.Tape) -> np.ndarray:
    """Flat gradient of a scalar tape node over every watched parameter slot.

    Slots the loss does not depend on get exact zeros.
    """
    if not isinstance(loss_node, ops.Tensor) or np.size(loss_node.value) != 1:
        raise ValueError("grad() needs a scalar Tensor recorded on the tape")
    adjoints = tape.backward(loss_node)
    flat = np.zeros(tape.param_size)
    for index, offset in tape.param_slots:
        g = adjoints[index]
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"Non-finite gradient for parameter slot at offset {offset}", node_kind="param")
        flat[offset:offset + np.size(g)] = np.ravel(g)
    return flat


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(params, gradient, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, sgd=False):
    """One Adam step with bias correction, or plain SGD when `sgd` is set.

    `params` is a ParamSet or a flat array; the same type is returned together
    with the new state. Inputs are not modified.
    """
    theta = params.theta if isinstance(params, ParamSet) else np.asarray(params, dtype=float)
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != theta.shape or state.m.shape != theta.shape:
        raise ValueError(f"Shape mismatch: params {theta.shape}, grad {gradient.shape}, state {state.m.shape}")

    t = state.t + 1
    if sgd:
        new_theta = theta - lr * gradient
        new_state = AdamState(state.m.copy(), state.v.copy(), t)
    else:
        m = beta1 * state.m + (1.0 - beta1) * gradient
        v = beta2 * state.v + (1.0 - beta2) * gradient * gradient
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_state = AdamState(m, v, t)

    if isinstance(params, ParamSet):
        return params.with_theta(new_theta), new_state
    return new_theta, new_state


# ─── Checkpoints ────────────────────────────────────────────────────────────

def save_params(params: ParamSet, path) -> None:
    """Write one JSON header line, then theta as little-endian float64."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": params.seed,
        "d": params.dim,
        "steps": params.steps,
        "network_mode": params.network_mode,
        "z_shape": params.z_shape.to_dict(),
        "u_shape": params.u_shape.to_dict(),
        "size": params.size,
        "slots": [[s.name, s.offset, list(s.shape)] for s in params.slots],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(params.theta.astype("<f8").tobytes())
    logger.info(f"Saved {params.size} parameters to {path}")


def load_params(path) -> ParamSet:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version {CHECKPOINT_VERSION} parameter checkpoint")
    if len(payload) != 8 * header["size"]:
        raise ValueError(f"{path} holds {len(payload)} bytes, header promises {8 * header['size']}")

    def shape_of(spec):
        return MLPShape(spec["input_dim"], tuple(spec["hidden_dims"]), spec["output_dim"], spec["activation"])

    theta = np.frombuffer(payload, dtype="<f8").astype(float)
    params = ParamSet(theta, shape_of(header["z_shape"]), shape_of(header["u_shape"]), header["steps"],
                      header["network_mode"], header["seed"])
    stored = [[s.name, s.offset, list(s.shape)] for s in params.slots]
    if stored != header["slots"]:
        raise ValueError(f"Slot layout in {path} does not match its declared shapes")
    return params


# ─── Gradient check ─────────────────────────────────────────────────────────

def gradcheck(shape: MLPShape, seed: int = 0, rows: int = 4, fd_step: float = 1e-6) -> float:
    """Largest scaled gap between tape gradients and central differences.

    The loss is the mean squared output of a random network with `shape` on
    random inputs; gaps are divided by max(|tape|, |fd|, 1e-3).
    """
    rng = np.random.default_rng(int(seed))
    dims = shape.layer_dims
    inputs = rng.normal(size=(int(rows), dims[0]))
    sizes = [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
    theta = rng.normal(0.0, 1.0, shape.parameter_count) / np.sqrt(max(dims))

    def loss(vector, tape=None):
        layers, offset = [], 0
        for fan_in, fan_out in sizes:
            pair = []
            for entry_shape in ((fan_in, fan_out), (fan_out,)):
                size = int(np.prod(entry_shape))
                value = vector[offset:offset + size].reshape(entry_shape)
                pair.append(tape.watch(value, offset) if tape is not None else value)
                offset += size
            layers.append(tuple(pair))
        return ops.mean(ops.square(mlp_forward(layers, inputs, shape.activation)))

    tape = ops.Tape()
    analytic = grad(loss(theta, tape), tape)
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = fd_step
        numeric[i] = (float(loss(theta + step)) - float(loss(theta - step))) / (2.0 * fd_step)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    return float(np.max(np.abs(analytic - numeric) / scale))

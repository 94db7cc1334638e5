"""Small MLP toolkit: layers, He-uniform init, Adam, freezing, checkpoints."""

import hashlib
import json

import numpy as np

from . import tensor as T
from .errors import ParameterError, ShapeError, StateError
from .tensor import Tensor

LEAKY_SLOPE = 0.2

_ACTIVATIONS = ("relu", "leaky_relu", "sigmoid", "identity")


def _apply_activation(name: str, x: Tensor) -> Tensor:
    if name == "relu":
        return T.relu(x)
    if name == "leaky_relu":
        return T.leaky_relu(x, LEAKY_SLOPE)
    if name == "sigmoid":
        return T.sigmoid(x)
    if name == "identity":
        return x
    raise ParameterError(f"unknown activation {name!r}, expected one of {_ACTIVATIONS}")


def he_uniform(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    limit = np.sqrt(6.0 / in_dim)
    return rng.uniform(-limit, limit, size=(out_dim, in_dim))


class Mlp:
    """Fully connected net: affine layers with per-layer activations.

    Weights are He-uniform, biases zero. Layer l maps x -> act(x @ W_l.T + b_l)
    with W_l of shape (out, in) and b_l stored as (1, out) for row broadcast.
    """

    def __init__(self, name: str, sizes, activations, rng: np.random.Generator):
        if len(sizes) < 2:
            raise ParameterError("Mlp needs at least an input and an output size")
        if len(activations) != len(sizes) - 1:
            raise ParameterError(
                f"expected {len(sizes) - 1} activations, got {len(activations)}"
            )
        for act in activations:
            if act not in _ACTIVATIONS:
                raise ParameterError(f"unknown activation {act!r}")
        self.name = name
        self.sizes = list(sizes)
        self.activations = list(activations)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self.weights.append(Tensor(he_uniform(rng, fan_out, fan_in), requires_grad=True))
            self.biases.append(Tensor(np.zeros((1, fan_out)), requires_grad=True))

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(
                f"{self.name}: expected input (n, {self.in_dim}), got {x.shape}"
            )
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            h = _apply_activation(act, T.add(T.matmul(h, T.transpose(w)), b))
        return h

    __call__ = forward

    def parameters(self):
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        return params

    def named_parameters(self):
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{self.name}.layer{i}.weight", w))
            out.append((f"{self.name}.layer{i}.bias", b))
        return out

    def freeze(self):
        """Exclude all parameters from gradient tracking. Idempotent."""
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    @property
    def frozen(self) -> bool:
        return all(not p.requires_grad for p in self.parameters())


def freeze(net: Mlp):
    net.freeze()


def input_gradient(net: Mlp, x) -> Tensor:
    """Gradient of the summed outputs w.r.t. the input, as a tape expression.

    Built by reverse-chaining through the layers with the activation
    derivative masks held constant, so the result is differentiable w.r.t.
    the weights with first-order machinery only. Exact almost everywhere
    for piecewise-linear activations; sigmoid layers are rejected because
    their derivative genuinely depends on the weights.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"expected input (n, {net.in_dim}), got {x.shape}")
    h = x.data
    masks = []
    for w, b, act in zip(net.weights, net.biases, net.activations):
        pre = h @ w.data.T + b.data
        if act == "relu":
            masks.append((pre > 0).astype(np.float64))
            h = np.maximum(pre, 0.0)
        elif act == "leaky_relu":
            masks.append(np.where(pre > 0, 1.0, LEAKY_SLOPE))
            h = np.where(pre > 0, pre, LEAKY_SLOPE * pre)
        elif act == "identity":
            masks.append(None)
            h = pre
        else:
            raise ParameterError(
                f"input_gradient supports piecewise-linear activations, not {act!r}"
            )
    g = Tensor(np.ones((x.shape[0], net.out_dim)))
    for w, mask in zip(reversed(net.weights), reversed(masks)):
        if mask is not None:
            g = T.mul(g, Tensor(mask))
        g = T.matmul(g, w)
    return g


class Adam:
    """Adam with bias correction; step() leaves gradients for the caller to zero."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if not lr > 0:
            raise ParameterError(f"lr must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise StateError("parameter has no gradient; run backward first")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def parameter_hash(named_params) -> str:
    """SHA-256 over parameter buffers (little-endian float64, name-ordered)."""
    h = hashlib.sha256()
    for name, p in sorted(named_params, key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


# Checkpoint format: one UTF-8 JSON header line
#   {"params": [{"name": ..., "shape": [...]}, ...]}
# terminated by "\n", then the raw little-endian float64 buffers
# concatenated in header order.


def save_checkpoint(path, named_params):
    records = []
    buffers = []
    for name, p in named_params:
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        records.append({"name": name, "shape": list(arr.shape)})
        buffers.append(arr.tobytes())
    header = json.dumps({"params": records}, separators=(",", ":"))
    with open(path, "wb") as f:
        f.write(header.encode("utf-8"))
        f.write(b"\n")
        for buf in buffers:
            f.write(buf)


def load_checkpoint(path):
    """Read a checkpoint; returns {name: float64 ndarray} in file order."""
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    out = {}
    offset = nl + 1
    for rec in header["params"]:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        out[rec["name"]] = arr.astype(np.float64)
        offset += count * 8
    return out


def load_into(net: Mlp, state: dict):
    for name, p in net.named_parameters():
        if name not in state:
            raise StateError(f"checkpoint missing parameter {name!r}")
        if state[name].shape != p.data.shape:
            raise ShapeError(
                f"checkpoint shape {state[name].shape} != model shape {p.data.shape} for {name!r}"
            )
        p.data[...] = state[name]

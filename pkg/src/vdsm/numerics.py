"""Small reverse-mode autodiff core in double precision.

Only the operations needed by the survival and VAE losses are provided.
Broadcasting follows numpy; gradients are reduced back to the operand
shape.  All arithmetic is float64.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from .errors import InvalidInputError, TrainingDivergenceError

LOG_2PI = math.log(2.0 * math.pi)
SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805
CHECKPOINT_VERSION = 1


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array node in the computation graph.

    Leaf tensors created with ``requires_grad=True`` accumulate ``grad``
    when :func:`backward` runs on a scalar that depends on them.
    """

    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(self.data) if requires_grad and not _parents else None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return _node(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return _node(a.data - b.data, (a, b), backward)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return _node(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return _node(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return _node(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise InvalidInputError("only constant exponents are supported")
        p = float(exponent)
        a = self
        return _node(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2:
            raise InvalidInputError("matmul expects 2-D operands")

        def backward(g):
            return g @ b.data.T, a.data.T @ g

        return _node(a.data @ b.data, (a, b), backward)

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    # shape ops ------------------------------------------------------------

    def __getitem__(self, index):
        a = self

        def backward(g):
            out = np.zeros_like(a.data)
            np.add.at(out, index, g)
            return (out,)

        return _node(a.data[index], (a,), backward)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))

    @property
    def T(self):
        return _node(self.data.T, (self,), lambda g: (g.T,))

    def sum(self, axis=None, keepdims=False):
        a = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # elementwise ----------------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return _node(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self
        return _node(np.log(a.data), (a,), lambda g: (g / a.data,))

    def tanh(self):
        out = np.tanh(self.data)
        return _node(out, (self,), lambda g: (g * (1.0 - out * out),))

    def relu(self):
        mask = self.data > 0
        return _node(self.data * mask, (self,), lambda g: (g * mask,))

    def selu(self):
        x = self.data
        pos = x > 0
        neg_part = SELU_ALPHA * np.expm1(np.minimum(x, 0.0))
        out = SELU_SCALE * np.where(pos, x, neg_part)
        deriv = SELU_SCALE * np.where(pos, 1.0, neg_part + SELU_ALPHA)
        return _node(out, (self,), lambda g: (g * deriv,))

    def softplus(self):
        x = self.data
        return _node(np.logaddexp(0.0, x), (self,), lambda g: (g * special.expit(x),))

    def sigmoid(self):
        out = special.expit(self.data)
        return _node(out, (self,), lambda g: (g * out * (1.0 - out),))

    def square(self):
        a = self
        return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def _node(data, parents, backward):
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def param(values, name=None):
    """Trainable leaf tensor."""
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)


# composite functions -------------------------------------------------------


def logsumexp(x, axis=-1, keepdims=False):
    """Numerically stable log-sum-exp along ``axis``."""
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = np.exp(x.data - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    weights = shifted / s

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    data = out if keepdims else np.squeeze(out, axis=axis)
    return _node(data, (x,), backward)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    return x - logsumexp(x, axis=axis, keepdims=True)


def softmax(x, axis=-1):
    return log_softmax(x, axis=axis).exp()


def log_ndtr(x):
    """log Phi(x) for the standard normal CDF Phi."""
    x = as_tensor(x)
    out = special.log_ndtr(x.data)

    def backward(g):
        # d/dx log Phi = phi / Phi, formed in log space for the far left tail
        return (g * np.exp(-0.5 * x.data * x.data - 0.5 * LOG_2PI - out),)

    return _node(out, (x,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise InvalidInputError("backward requires a scalar loss")
    if not loss.requires_grad:
        return
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# layers ------------------------------------------------------------------------

ACTIVATIONS = ("relu", "tanh", "selu")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple = (100,)
    output_dim: int = 1
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise InvalidInputError(f"all MLP dimensions must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden_dims, self.output_dim)


def init_mlp_params(spec, rng, prefix="mlp"):
    """Glorot-uniform weights, zero biases."""
    params = {}
    dims = spec.layer_dims
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"{prefix}.W{i}"] = param(rng.uniform(-limit, limit, (fan_in, fan_out)), f"{prefix}.W{i}")
        params[f"{prefix}.b{i}"] = param(np.zeros(fan_out), f"{prefix}.b{i}")
    return params


def _activate(h, activation):
    return getattr(h, activation)()


def mlp_forward(spec, params, x, prefix="mlp"):
    """Apply the MLP to a vector (returns a vector) or a row batch.

    ``params`` maps ``{prefix}.W{i}`` / ``{prefix}.b{i}`` to tensors. The
    output layer is linear.
    """
    x = as_tensor(x)
    vector = x.ndim == 1
    if vector:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise InvalidInputError(f"expected input of width {spec.input_dim}, got shape {x.shape}")
    n_layers = len(spec.layer_dims) - 1
    h = x
    for i in range(n_layers):
        h = h @ params[f"{prefix}.W{i}"] + params[f"{prefix}.b{i}"]
        if i < n_layers - 1:
            h = _activate(h, spec.activation)
    return h.reshape(-1) if vector else h


class Mlp:
    """Bundle of an :class:`MlpSpec` with its parameters."""

    def __init__(self, spec, rng, prefix):
        self.spec = spec
        self.prefix = prefix
        self.params = init_mlp_params(spec, rng, prefix)

    def __call__(self, x):
        return mlp_forward(self.spec, self.params, x, self.prefix)

    def zero_(self):
        for p in self.params.values():
            p.data[...] = 0.0


# optimisation ------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads=None):
    """One bias-corrected Adam update, in place on ``params``.

    ``params`` maps names to leaf tensors; ``grads`` defaults to their
    accumulated ``.grad``.
    """
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    for name, g in grads.items():
        if g is None or not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for parameter {name!r}", name)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def clip_grad_norm(params, max_norm):
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None))
    if max_norm is not None and total > max_norm:
        scale = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


def zero_grads(params):
    for p in params.values():
        p.zero_grad()


class RngStream:
    """Seeded random stream (PCG64). Same seed, same draws on any platform."""

    def __init__(self, seed):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self):
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def exponential(self, size=None):
        return self._gen.standard_exponential(size)

    def gumbel(self, size=None, eps=1e-12):
        return gumbel_from_uniform(self._gen.uniform(0.0, 1.0, size), eps)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size=None, p=None):
        return self._gen.choice(n, size=size, p=p)

    def spawn(self, key):
        """Derive an independent child stream keyed by an integer."""
        seq = np.random.SeedSequence([self.seed, int(key)])
        return RngStream(int(seq.generate_state(1, dtype=np.uint64)[0]))


def gumbel_from_uniform(u, eps=1e-12):
    u = np.clip(np.asarray(u, dtype=np.float64), eps, 1.0 - eps)
    return -np.log(-np.log(u))


# checkpoints -------------------------------------------------------------------


def save_checkpoint(path, arrays, meta=None):
    """Write named arrays plus metadata as one JSON text file.

    Arrays are stored flat in row-major order next to their shape.
    """
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "arrays": {
            name: {"shape": list(np.shape(a)), "values": np.asarray(a, dtype=np.float64).ravel().tolist()}
            for name, a in arrays.items()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint format_version {version!r}")
    arrays = {
        name: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["arrays"].items()
    }
    return arrays, doc.get("meta", {})

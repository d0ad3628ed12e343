"""Differentiable numerical core.

Dense float64 tensors with reverse-mode accumulation over a per-loss
recorded graph, small feedforward networks, the Adam update, and the
learning-rate schedule used by the training loop.  Graphs are rebuilt
for every loss evaluation; only parameter tensors persist.

Checkpoints are a JSON manifest plus a single raw blob of little-endian
float64 arrays referenced by name and byte offset.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import special as _sp

from .errors import ContractError, ShapeError, TrainingError

__all__ = [
    "Tensor", "as_tensor", "constant", "parameter",
    "relu", "sigmoid", "exp", "log", "lgamma", "clip", "matmul",
    "l2norm", "concat", "stack_last", "logsumexp",
    "backward", "MlpParams", "mlp_forward",
    "AdamState", "adam_step", "lr_schedule", "xavier_uniform",
    "save_checkpoint", "load_checkpoint",
]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array recorded on a dynamically built computation graph.

    ``parents`` and ``vjp`` describe how to push a cotangent back to the
    inputs; leaves (constants and parameters) have neither.
    """

    __slots__ = ("data", "grad", "name", "_parents", "_vjp")

    def __init__(self, data, parents=(), vjp=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = parents
        self._vjp = vjp

    # ---- plumbing -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # ---- arithmetic -----------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data + other.data, (self, other))

        def vjp(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape))
        out._vjp = vjp
        return out

    __radd__ = __add__

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data * other.data, (self, other))

        def vjp(g):
            return (_unbroadcast(g * other.data, self.shape),
                    _unbroadcast(g * self.data, other.shape))
        out._vjp = vjp
        return out

    __rmul__ = __mul__

    def __neg__(self):
        out = Tensor(-self.data, (self,))
        out._vjp = lambda g: (-g,)
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __truediv__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data / other.data, (self, other))

        def vjp(g):
            return (_unbroadcast(g / other.data, self.shape),
                    _unbroadcast(-g * self.data / other.data ** 2, other.shape))
        out._vjp = vjp
        return out

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p: float):
        out = Tensor(self.data ** p, (self,))
        out._vjp = lambda g: (g * p * self.data ** (p - 1),)
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    # ---- shape ops ------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), (self,))
        out._vjp = lambda g: (g.reshape(self.shape),)
        return out

    def transpose(self, axes=None) -> "Tensor":
        if axes is None:
            axes = tuple(range(self.data.ndim - 2)) + (-1, -2)
        axes = tuple(a % self.data.ndim for a in axes)
        inv = np.argsort(axes)
        out = Tensor(self.data.transpose(axes), (self,))
        out._vjp = lambda g: (g.transpose(inv),)
        return out

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, self.shape),)
            ax = axis if isinstance(axis, tuple) else (axis,)
            if not keepdims:
                g = np.expand_dims(g, ax)
            return (np.broadcast_to(g, self.shape),)
        out._vjp = vjp
        return out

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """A graph leaf that never receives a gradient name."""
    return Tensor(x)


def parameter(x, name: str) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), name=name)


# ---- elementwise nonlinearities -----------------------------------

def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0), (x,))
    out._vjp = lambda g: (g * (x.data > 0.0),)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(s, (x,))
    out._vjp = lambda g: (g * s * (1.0 - s),)
    return out


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    out = Tensor(e, (x,))
    out._vjp = lambda g: (g * e,)
    return out


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.log(x.data), (x,))
    out._vjp = lambda g: (g / x.data,)
    return out


def lgamma(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(_sp.gammaln(x.data), (x,))
    out._vjp = lambda g: (g * _sp.digamma(x.data),)
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with pass-through gradient strictly inside (lo, hi)."""
    x = as_tensor(x)
    out = Tensor(np.clip(x.data, lo, hi), (x,))
    out._vjp = lambda g: (g * ((x.data > lo) & (x.data < hi)),)
    return out


def l2norm(x: Tensor) -> Tensor:
    """Euclidean norm of all entries, with subgradient 0 at the origin."""
    x = as_tensor(x)
    n = float(np.sqrt((x.data * x.data).sum()))
    out = Tensor(n, (x,))
    out._vjp = lambda g: (g * x.data / max(n, 1e-300),)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes.

    Both operands must be at least 2-D; wrap vectors in an explicit
    trailing axis at the call site.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, (a, b))

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return (ga, gb)
    out._vjp = vjp
    return out


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    out._vjp = lambda g: tuple(np.split(g, splits, axis=axis))
    return out


def stack_last(parts: list[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new trailing axis (matrix columns)."""
    return concat([p.reshape(p.shape + (1,)) for p in parts], axis=-1)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Numerically stable log-sum-exp; the max shift is treated as data."""
    x = as_tensor(x)
    c = np.max(x.data, axis=axis, keepdims=True)
    c = np.where(np.isfinite(c), c, 0.0)
    shifted = x - constant(c)
    out = log(exp(shifted).sum(axis=axis, keepdims=True)) + constant(c)
    if not keepdims:
        out = out.reshape(tuple(s for i, s in enumerate(out.shape)
                                if i != axis % x.data.ndim))
    return out


# ---- reverse pass -------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = {id(root)}
    stack: list[tuple[Tensor, object]] = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        descended = False
        for p in it:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                descended = True
                break
        if not descended:
            order.append(node)
            stack.pop()
    return order


def backward(loss: Tensor, params: dict[str, Tensor] | None = None):
    """Accumulate d(loss)/d(node) for every node reachable from ``loss``.

    ``loss`` must be scalar.  When ``params`` is given, returns a dict of
    gradients keyed like ``params``; parameters not touched by the loss
    get exact zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    # First contribution to a node aliases the vjp output; a second
    # contribution replaces it with a fresh sum so shared buffers are
    # never mutated in place.
    owned: set[int] = set()
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for p, g in zip(node._parents, grads):
            if g is None:
                continue
            if p.grad is None:
                p.grad = g
            elif id(p) in owned:
                p.grad += g
            else:
                p.grad = p.grad + g
                owned.add(id(p))
    if params is None:
        return None
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in params.items()}


# ---- feedforward networks -----------------------------------------

_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "linear": lambda t: t}


def xavier_uniform(fan_out: int, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_out, fan_in))


@dataclass
class MlpParams:
    """Fully connected network: widths, per-layer weights/biases/activations.

    ``weights[i]`` has shape (widths[i+1], widths[i]); activations are one
    of relu | sigmoid | linear, one tag per weight layer.
    """

    widths: list[int]
    weights: list[Tensor]
    biases: list[Tensor]
    activations: list[str]

    @classmethod
    def create(cls, widths: list[int], activations: list[str],
               rng: np.random.Generator, name: str) -> "MlpParams":
        if len(activations) != len(widths) - 1:
            raise ShapeError("need one activation per weight layer")
        for a in activations:
            if a not in _ACTIVATIONS:
                raise ShapeError(f"unknown activation {a!r}")
        weights, biases = [], []
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            weights.append(parameter(xavier_uniform(n_out, n_in, rng), f"{name}.w{i}"))
            biases.append(parameter(np.zeros(n_out), f"{name}.b{i}"))
        return cls(list(widths), weights, biases, list(activations))

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for t in (*self.weights, *self.biases):
            out[t.name] = t
        return out

    def scale_parameters(self, factor: float) -> None:
        for t in (*self.weights, *self.biases):
            t.data *= factor


def mlp_forward(params: MlpParams, x) -> Tensor:
    """Run the activation chain on input with features along the last axis."""
    x = as_tensor(x)
    if x.shape[-1] != params.widths[0]:
        raise ShapeError(
            f"input width {x.shape[-1]} != expected {params.widths[0]}")
    squeeze = x.data.ndim == 1
    if squeeze:
        x = x.reshape((1, x.shape[0]))
    for w, b, act in zip(params.weights, params.biases, params.activations):
        x = _ACTIVATIONS[act](matmul(x, w.transpose()) + b)
    if squeeze:
        x = x.reshape((x.shape[-1],))
    return x


# ---- optimizer -----------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: dict[str, Tensor], **kw) -> "AdamState":
        return cls(m={k: np.zeros_like(t.data) for k, t in params.items()},
                   v={k: np.zeros_like(t.data) for k, t in params.items()}, **kw)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> AdamState:
    """Standard Adam update with bias correction, in place on the tensors."""
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient", param=name)
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


def lr_schedule(epoch: int) -> float:
    """0.001 decayed by 0.9 each epoch, held constant from epoch 10 on."""
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return 0.001 * 0.9 ** min(epoch, 10)


# ---- checkpoints ----------------------------------------------------

_CKPT_FORMAT = "unmix-ckpt-v1"


def save_checkpoint(base_path: str, meta: dict, params: dict[str, Tensor | np.ndarray]):
    """Write ``<base>.json`` manifest + ``<base>.raw`` little-endian f64 blob."""
    arrays = {}
    offset = 0
    blob = bytearray()
    for name in params:
        data = params[name].data if isinstance(params[name], Tensor) else params[name]
        data = np.asarray(data, dtype="<f8")
        flat = data.ravel(order="C")
        arrays[name] = {"offset": offset, "count": int(flat.size),
                        "shape": list(data.shape)}
        blob += flat.tobytes()
        offset += flat.nbytes
    manifest = {"format": _CKPT_FORMAT, "dtype": "f64le",
                "meta": meta, "arrays": arrays}
    with open(base_path + ".json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    with open(base_path + ".raw", "wb") as f:
        f.write(bytes(blob))


def load_checkpoint(base_path: str) -> tuple[dict, dict[str, np.ndarray]]:
    from .errors import BundleError
    json_path = base_path + ".json"
    if not os.path.exists(json_path):
        raise BundleError(f"missing checkpoint manifest {json_path}")
    with open(json_path) as f:
        manifest = json.load(f)
    if manifest.get("format") != _CKPT_FORMAT:
        raise BundleError("unknown checkpoint format", field="format")
    if manifest.get("dtype") != "f64le":
        raise BundleError("unsupported dtype", field="dtype")
    with open(base_path + ".raw", "rb") as f:
        blob = f.read()
    arrays = {}
    for name, spec in manifest["arrays"].items():
        start = spec["offset"]
        end = start + spec["count"] * 8
        if end > len(blob):
            raise BundleError("array extends past payload", field=name)
        arr = np.frombuffer(blob[start:end], dtype="<f8").astype(np.float64)
        arrays[name] = arr.reshape(spec["shape"])
    return manifest["meta"], arrays


def load_params_into(params: dict[str, Tensor], arrays: dict[str, np.ndarray]):
    """Copy checkpoint arrays over live parameter tensors, by name."""
    from .errors import BundleError
    for name, t in params.items():
        if name not in arrays:
            raise BundleError("checkpoint missing parameter", field=name)
        if arrays[name].shape != t.data.shape:
            raise BundleError("checkpoint shape mismatch", field=name)
        t.data = arrays[name].copy()

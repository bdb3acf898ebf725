"""Small reverse-mode autodiff engine over numpy arrays, plus MLPs and Adam.

Everything is float64.  Tensors record their parents only while gradient
recording is enabled (see :func:`no_grad`); the recorded graph lives on the
tensors themselves, so every forward call builds its own tape.
"""
from __future__ import annotations

import contextlib
import contextvars
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

CHECKPOINT_VERSION = 1

_recording = contextvars.ContextVar("gridflow_grad_recording", default=True)


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    token = _recording.set(False)
    try:
        yield
    finally:
        _recording.reset(token)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, name: str = ""):
        if isinstance(data, np.ndarray) and data.dtype == np.float64:
            arr = data
        else:
            arr = np.array(data, dtype=np.float64)
        # a sum is non-finite iff some entry is (or the sum overflows, also worth flagging)
        if not math.isfinite(arr.sum()):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        rec = bool(_parents) and _recording.get() and any(p.requires_grad for p in _parents)
        self._parents = tuple(_parents) if rec else ()
        self._backward = _backward if rec else None
        if rec:
            self.requires_grad = True
        self.name = name

    # ---------------------------------------------------------------- basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _acc(self, g):
        if not self.requires_grad:
            return
        self.grad = g.copy() if self.grad is None else self.grad + g

    # ------------------------------------------------------------ arithmetic
    def __add__(self, other):
        other = as_tensor(other)

        def bw(g, a=self, b=other):
            a._acc(_unbroadcast(g, a.shape))
            b._acc(_unbroadcast(g, b.shape))
        return Tensor(self.data + other.data, _parents=(self, other), _backward=bw)

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, _parents=(self,), _backward=lambda g, a=self: a._acc(-g))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)

        def bw(g, a=self, b=other):
            a._acc(_unbroadcast(g * b.data, a.shape))
            b._acc(_unbroadcast(g * a.data, b.shape))
        return Tensor(self.data * other.data, _parents=(self, other), _backward=bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)

        def bw(g, a=self, b=other):
            a._acc(_unbroadcast(g / b.data, a.shape))
            b._acc(_unbroadcast(-g * a.data / b.data**2, b.shape))
        return Tensor(self.data / other.data, _parents=(self, other), _backward=bw)

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.ndim != 2 or other.ndim != 2 or self.shape[1] != other.shape[0]:
            if not (self.ndim == 1 and other.ndim == 2 and self.shape[0] == other.shape[0]):
                raise ShapeError(f"matmul shapes {self.shape} @ {other.shape}")
            return (self.reshape(1, -1) @ other).reshape(-1)

        def bw(g, a=self, b=other):
            a._acc(g @ b.data.T)
            b._acc(a.data.T @ g)
        return Tensor(self.data @ other.data, _parents=(self, other), _backward=bw)

    def __getitem__(self, idx):
        def bw(g, a=self):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._acc(full)
        return Tensor(self.data[idx], _parents=(self,), _backward=bw)

    def reshape(self, *shape):
        return Tensor(self.data.reshape(*shape), _parents=(self,),
                      _backward=lambda g, a=self: a._acc(g.reshape(a.shape)))

    @property
    def T(self):
        return Tensor(self.data.T, _parents=(self,), _backward=lambda g, a=self: a._acc(g.T))

    # ------------------------------------------------------------ elementwise
    def relu(self):
        mask = self.data > 0
        return Tensor(self.data * mask, _parents=(self,), _backward=lambda g, a=self: a._acc(g * mask))

    def tanh(self):
        y = np.tanh(self.data)
        return Tensor(y, _parents=(self,), _backward=lambda g, a=self: a._acc(g * (1 - y * y)))

    def exp(self):
        y = np.exp(self.data)
        return Tensor(y, _parents=(self,), _backward=lambda g, a=self: a._acc(g * y))

    def log(self):
        return Tensor(np.log(self.data), _parents=(self,),
                      _backward=lambda g, a=self: a._acc(g / a.data))

    def square(self):
        return self * self

    def abs(self):
        s = np.sign(self.data)
        return Tensor(np.abs(self.data), _parents=(self,), _backward=lambda g, a=self: a._acc(g * s))

    def clip(self, lo: float, hi: float):
        mask = (self.data >= lo) & (self.data <= hi)
        return Tensor(np.clip(self.data, lo, hi), _parents=(self,),
                      _backward=lambda g, a=self: a._acc(g * mask))

    # -------------------------------------------------------------- reducers
    def sum(self, axis=None, keepdims=False):
        def bw(g, a=self):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._acc(np.broadcast_to(g, a.shape).copy())
        return Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,), _backward=bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def _arg_reduce(self, axis, pick):
        # gradient goes to the first extremal element along ``axis``
        idx = pick(self.data, axis=axis)
        out = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

        def bw(g, a=self):
            full = np.zeros_like(a.data)
            np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
            a._acc(full)
        return Tensor(out, _parents=(self,), _backward=bw)

    def max(self, axis=0):
        return self._arg_reduce(axis, np.argmax)

    def min(self, axis=0):
        return self._arg_reduce(axis, np.argmin)

    def log_softmax(self):
        z = self.data - self.data.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        out = z - lse
        p = np.exp(out)

        def bw(g, a=self):
            a._acc(g - p * g.sum(axis=-1, keepdims=True))
        return Tensor(out, _parents=(self,), _backward=bw)

    # -------------------------------------------------------------- backward
    def backward(self):
        if self.data.size != 1:
            raise GraphError("backward() needs a scalar loss")
        if not self.requires_grad:
            raise GraphError("loss is not connected to any tracked tensor")
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        # interior buffers restart from zero, leaves keep accumulating
        for node in order:
            if node._backward is not None:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g, ts=tensors):
        for t, part in zip(ts, np.split(g, splits, axis=axis)):
            t._acc(part)
    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), _parents=tuple(tensors), _backward=bw)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data

    def bw(g, a=a, b=b):
        a._acc(_unbroadcast(g * pick_a, a.shape))
        b._acc(_unbroadcast(g * ~pick_a, b.shape))
    return Tensor(np.where(pick_a, a.data, b.data), _parents=(a, b), _backward=bw)


def masked_reduce(x: Tensor, mask: np.ndarray, how: str) -> Tensor:
    """Reduce ``x`` of shape (n, k, d) over axis 1 where ``mask`` (n, k) is set.

    Rows with no valid entry reduce to zero.  For min/max the gradient goes to
    the first extremal valid entry.
    """
    data = x.data
    valid = mask[:, :, None]
    count = mask.sum(axis=1)
    empty = count == 0
    if how == "mean":
        denom = np.maximum(count, 1)[:, None]
        out = np.where(valid, data, 0.0).sum(axis=1) / denom

        def bw(g, a=x):
            a._acc(np.broadcast_to((g / denom)[:, None, :], data.shape) * valid)
        return Tensor(out, _parents=(x,), _backward=bw)
    if how == "max":
        filled = np.where(valid, data, -np.inf)
        idx = np.argmax(filled, axis=1)
    elif how == "min":
        filled = np.where(valid, data, np.inf)
        idx = np.argmin(filled, axis=1)
    else:
        raise ValueError(how)
    out = np.take_along_axis(data, idx[:, None, :], axis=1)[:, 0, :]
    out[empty] = 0.0

    def bw(g, a=x):
        full = np.zeros_like(data)
        g = np.where(empty[:, None], 0.0, g)
        np.put_along_axis(full, idx[:, None, :], g[:, None, :], axis=1)
        a._acc(full)
    return Tensor(out, _parents=(x,), _backward=bw)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    return x[np.asarray(idx)]


# ------------------------------------------------------------------ layers

ACTIVATIONS = {
    "relu": Tensor.relu,
    "tanh": Tensor.tanh,
    "identity": lambda t: t,
}


@dataclass
class Mlp:
    """Dense layers ``x @ W + b`` with one activation name per layer."""

    weights: list
    biases: list
    activations: tuple

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, hidden: str = "relu",
             output: str = "identity", name: str = "mlp", gain: float = 1.0,
             zero_bias: bool = False) -> "Mlp":
        """Weights uniform in +-gain/sqrt(fan_in); biases the same at gain 1, or zero."""
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(parameter(rng.uniform(-gain * bound, gain * bound, (fan_in, fan_out)), f"{name}.{i}.W"))
            b = np.zeros(fan_out) if zero_bias else rng.uniform(-bound, bound, fan_out)
            biases.append(parameter(b, f"{name}.{i}.b"))
        acts = tuple([hidden] * (len(sizes) - 2) + [output])
        return cls(weights, biases, acts)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def __call__(self, x) -> Tensor:
        return mlp_forward(self, x)

    def named_parameters(self, prefix: str) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.{i}.W"] = w
            out[f"{prefix}.{i}.b"] = b
        return out

    def n_params(self) -> int:
        return sum(w.data.size + b.data.size for w, b in zip(self.weights, self.biases))


def mlp_forward(params: Mlp, x) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != params.weights[0].shape[0]:
        raise ShapeError(f"input dim {x.shape[-1]} != layer input {params.weights[0].shape[0]}")
    for w, b, act in zip(params.weights, params.biases, params.activations):
        x = ACTIVATIONS[act](x @ w + b)
    return x


# -------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; writes new values into the parameter tensors."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"grad for {name} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1**state.step)
        v_hat = v / (1 - b2**state.step)
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def gradients(loss: Tensor, params: dict) -> dict:
    """Zero ``params``' grads, backpropagate ``loss``, return name -> grad copies."""
    for p in params.values():
        p.zero_grad()
    loss.backward()
    return {k: p.grad.copy() for k, p in params.items()}


def finite_diff_check(params: dict, loss_fn: Callable[[], Tensor], samples: int = 20,
                      seed: int = 0, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences on random coordinates."""
    rng = np.random.default_rng(seed)
    grads = gradients(loss_fn(), params)
    names = sorted(params)
    sizes = np.array([params[n].data.size for n in names])
    worst = 0.0
    with no_grad():
        for _ in range(samples):
            k = rng.choice(len(names), p=sizes / sizes.sum())
            p = params[names[k]]
            flat = p.data.reshape(-1)
            j = rng.integers(flat.size)
            orig = flat[j]
            flat[j] = orig + h
            up = loss_fn().item()
            flat[j] = orig - h
            down = loss_fn().item()
            flat[j] = orig
            numeric = (up - down) / (2 * h)
            analytic = grads[names[k]].reshape(-1)[j]
            err = abs(numeric - analytic) / max(abs(numeric) + abs(analytic), 1e-8)
            worst = max(worst, err)
    return worst


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    Path(path).write_text(dumps_checkpoint(params, meta))


def dumps_checkpoint(params: dict, meta: dict | None = None) -> str:
    doc = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
            for name, t in sorted(params.items())
        },
    }
    return json.dumps(doc)


def load_checkpoint(path) -> tuple[dict, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    arrays = {
        name: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["params"].items()
    }
    return arrays, doc.get("meta", {})

"""Dense float64 arrays with tape-based reverse-mode differentiation.

Every op evaluates eagerly on numpy arrays and, when any input requires a
gradient, records a closure that maps the output gradient back onto its
inputs. ``backward`` walks that tape in reverse topological order.
"""

from __future__ import annotations

import base64
import json
import threading
from collections import OrderedDict
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .fileio import write_json

_local = threading.local()


@contextmanager
def no_grad():
    """Evaluate ops without recording the tape (inference)."""
    previous = getattr(_local, "grad_enabled", True)
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    # make numpy defer to the reflected Tensor operators (ndarray + Tensor -> Tensor)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = ""):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        # leaves start from zero; op outputs get theirs on the first backward
        self.grad = np.zeros_like(self.data) if requires_grad and not _parents else None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data) if not self._parents else None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
        track = getattr(_local, "grad_enabled", True) and any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=track, _parents=tuple(parents) if track else (), _op=op)
        if track:
            out._backward = backward
        return out

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every upstream node."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        return add(self, neg(_lift(other)))

    def __rsub__(self, other) -> Tensor:
        return add(_lift(other), neg(self))

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / _as_array(other))

    def __rtruediv__(self, other) -> Tensor:
        return mul(_lift(other), reciprocal(self))

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __rmatmul__(self, other) -> Tensor:
        return matmul(other, self)

    def __getitem__(self, index) -> Tensor:
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def tanh(self) -> Tensor:
        return tanh(self)

    def relu(self) -> Tensor:
        return relu(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(out, (a, b), "add", backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), "neg", lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), "mul", backward)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return Tensor._make(out, (a,), "reciprocal", lambda g: (-g * out * out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


@contextmanager
def record_relu_patterns():
    """Collect the on/off pattern of every relu evaluated inside the block.

    Yields a list that receives one boolean array per relu call, in call
    order. Used to detect finite-difference stencils that cross a kink.
    """
    previous = getattr(_local, "relu_log", None)
    log: list[np.ndarray] = []
    _local.relu_log = log
    try:
        yield log
    finally:
        _local.relu_log = previous


def relu(a: Tensor) -> Tensor:
    live = a.data > 0
    log = getattr(_local, "relu_log", None)
    if log is not None:
        log.append(live)
    out = np.where(live, a.data, 0.0)
    return Tensor._make(out, (a,), "relu", lambda g: (np.where(live, g, 0.0),))


# -- shape ops --------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return Tensor._make(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor, start: int = 1) -> Tensor:
    return reshape(a, a.shape[:start] + (-1,))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inverse),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; the backward pass scatter-adds."""
    out = a.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return Tensor._make(np.array(out, dtype=np.float64), (a,), "getitem", backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_lift(p) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[p.shape for p in parts]}") from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, parts, "concat", backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(out, (a,), "sum", backward)


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch extents do not broadcast: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), "matmul", backward)


# -- normalisation ----------------------------------------------------------


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (broadcastable bool) marks
    admissible entries; excluded entries get exactly zero weight."""
    if mask is None:
        z = x.data - x.data.max(axis=-1, keepdims=True)
    else:
        z = np.where(mask, x.data, -np.inf)
        z -= z.max(axis=-1, keepdims=True)
    out = np.exp(z, out=z)
    out /= out.sum(axis=-1, keepdims=True)

    def backward(g):
        gx = g * out
        gx -= out * gx.sum(axis=-1, keepdims=True)
        return (gx,)

    return Tensor._make(out, (x,), "softmax", backward)


def layernorm_lastdim(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, gg, gb

    return Tensor._make(out, (x, gain, bias), "layernorm", backward)


# -- parameters -------------------------------------------------------------


class ParameterStore:
    """Ordered, uniquely named collection of trainable tensors."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def n_values(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def copy(self) -> ParameterStore:
        clone = ParameterStore()
        for name, t in self._params.items():
            clone.add(name, t.data.copy())
        return clone

    def load_values(self, other: ParameterStore) -> None:
        """Overwrite values in place from a store with identical names/shapes."""
        if other.names() != self.names():
            raise KeyError("parameter names differ")
        for name, t in self._params.items():
            src = other[name].data
            if src.shape != t.shape:
                raise ShapeError(f"{name}: shape {src.shape} != {t.shape}")
            t.data = src.copy()

    def to_records(self) -> list[dict]:
        return [
            {
                "name": name,
                "shape": list(t.shape),
                "values": base64.b64encode(np.ascontiguousarray(t.data, dtype="<f8").tobytes()).decode("ascii"),
            }
            for name, t in self._params.items()
        ]

    @classmethod
    def from_records(cls, records: list[dict]) -> ParameterStore:
        store = cls()
        for rec in records:
            raw = np.frombuffer(base64.b64decode(rec["values"]), dtype="<f8")
            store.add(rec["name"], raw.reshape(tuple(rec["shape"])).astype(np.float64))
        return store

    def save(self, path: str | Path) -> None:
        write_json(path, {"parameters": self.to_records()})

    @classmethod
    def load(cls, path: str | Path) -> ParameterStore:
        return cls.from_records(json.loads(Path(path).read_text())["parameters"])

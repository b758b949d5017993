"""Dense float64 tensors with tape-style reverse-mode differentiation.

Every differentiable result records its parents and a backward closure.
Nodes carry a monotonically increasing ``node_id``; :func:`backward` replays
the recorded ancestors of the loss in decreasing id order, which is the
reverse of the order in which they were recorded.
"""
from __future__ import annotations

import itertools
import json
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

EPS_LOG = 1e-12

_ids = itertools.count()

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class DimensionError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class StateError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(arr: np.ndarray) -> Tensor:
    """Wrap a float64 array as a non-differentiable leaf without copying it."""
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    out.requires_grad = False
    out.node_id = next(_ids)
    out._parents = ()
    out._backward = None
    out.name = None
    return out


def _record(data: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.node_id = next(_ids)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{op}: non-finite input")


# elementwise

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _record(out_data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, -g)

    return _record(-a.data, (a,), bw)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _record(a.data * b.data, (a, b), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        _accumulate(a, g * mask)

    return _record(np.where(mask, a.data, 0.0), (a,), bw)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * out_data)

    return _record(out_data, (a,), bw)


def log(a: Tensor, floor: float = EPS_LOG) -> Tensor:
    """Natural log of ``a + floor``; the floor keeps exact zeros finite."""
    shifted = a.data + floor

    def bw(g):
        _accumulate(a, g / shifted)

    return _record(np.log(shifted), (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, 2.0 * a.data * g)

    return _record(a.data * a.data, (a,), bw)


# reductions and shape

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _record(np.asarray(out_data, dtype=np.float64), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape

    def bw(g):
        _accumulate(a, g.reshape(old))

    return _record(a.data.reshape(tuple(shape)), (a,), bw)


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows ``a[index]`` along the leading axis."""
    index = np.asarray(index, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accumulate(a, full)

    return _record(a.data[index], (a,), bw)


# linear algebra

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} x {b.shape}")

    def bw(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _record(a.data @ b.data, (a, b), bw)


def vecmat(p: ArrayLike, m: ArrayLike) -> Tensor:
    """Batched row-vector times matrix: ``out[n, j] = sum_i p[n, i] * m[n, i, j]``."""
    p, m = as_tensor(p), as_tensor(m)
    if p.ndim != 2 or m.ndim != 3 or m.shape[0] != p.shape[0] or m.shape[1] != p.shape[1]:
        raise DimensionError(f"vecmat expects (N, C) and (N, C, K), got {p.shape} and {m.shape}")

    def bw(g):
        _accumulate(p, np.einsum("nj,nij->ni", g, m.data))
        _accumulate(m, p.data[:, :, None] * g[:, None, :])

    return _record(np.einsum("ni,nij->nj", p.data, m.data), (p, m), bw)


# probability

def softmax(z: Tensor, axis: int = -1) -> Tensor:
    _check_finite(z.data, "softmax")
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accumulate(z, s * (g - dot))

    return _record(s, (z,), bw)


def _check_onehot(y: np.ndarray) -> None:
    ok = np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)
    if not ok:
        raise ValueError("labels must be one-hot: exactly one 1 per row, zeros elsewhere")


def cross_entropy(p: Tensor, y_onehot, reduction: str = "mean") -> Tensor:
    """``-sum_i y_i log(p_i + 1e-12)`` per row, then mean (or sum) over rows."""
    y = np.asarray(y_onehot.data if isinstance(y_onehot, Tensor) else y_onehot, dtype=np.float64)
    _check_onehot(y)
    p = as_tensor(p)
    if p.shape != y.shape:
        raise DimensionError(f"cross_entropy shape mismatch: {p.shape} vs {y.shape}")
    per_row = neg(sum(mul(log(p), y), axis=-1))
    if per_row.ndim == 0 or reduction == "none":
        return per_row
    if reduction == "sum":
        return sum(per_row)
    return mean(per_row)


def mse(a: Tensor, b: ArrayLike) -> Tensor:
    diff = add(a, neg(as_tensor(b)))
    return mean(square(diff))


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros(labels.shape + (n_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


# reverse pass

def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any differentiable tensor")

    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in nodes:
            continue
        nodes[t.node_id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    for t in nodes.values():
        if t._backward is not None:
            t.grad = None
    loss.grad = np.ones_like(loss.data)
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)


# parameters and optimization

class ParameterSet:
    """Named leaf tensors plus zero-initialized momentum buffers."""

    def __init__(self, entries: Optional[dict] = None):
        self.entries: dict[str, Tensor] = {}
        self.momentum: dict[str, np.ndarray] = {}
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self.entries[name] = t
        self.momentum[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.entries.items()}

    def copy(self) -> "ParameterSet":
        out = ParameterSet(self.snapshot())
        for k, v in self.momentum.items():
            out.momentum[k] = v.copy()
        return out

    def load_values(self, values: dict) -> None:
        for name, t in self.entries.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"{name}: stored shape {arr.shape} != expected {t.shape}")
            t.data = arr.copy()


def sgd_step(params: ParameterSet, lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    for name, t in params.items():
        if t.grad is None:
            raise StateError(f"parameter {name!r} has no gradient")
    for name, t in params.items():
        g = t.grad
        if weight_decay:
            g = g + weight_decay * t.data
        v = momentum * params.momentum[name] + g
        params.momentum[name] = v
        t.data = t.data - lr * v
        t.grad = None


# checkpoint file

CHECKPOINT_VERSION = 1


def save_parameters(params: ParameterSet, path, seed: Optional[int] = None, meta: Optional[dict] = None) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "seed": seed,
        "meta": meta or {},
        "parameters": {
            name: {"shape": list(t.shape), "values": t.data.ravel().tolist()}
            for name, t in params.items()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_parameters(path) -> tuple[ParameterSet, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format_version {doc.get('format_version')!r}")
    params = ParameterSet()
    for name, entry in doc["parameters"].items():
        shape = tuple(entry["shape"])
        params.add(name, np.array(entry["values"], dtype=np.float64).reshape(shape))
    return params, doc

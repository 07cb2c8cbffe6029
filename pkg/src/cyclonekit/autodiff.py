"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every op returns a new immutable :class:`Tensor`. When any input requires a
gradient the result remembers its parents, a backward closure and a creation
sequence number. :func:`backward` collects the reachable nodes and replays
them in reverse creation order, visiting each node exactly once.

Broadcasting is deliberately limited to a trailing-axis operand (bias or
per-feature scale). Anything else must be expanded explicitly with
:func:`expand`.
"""
from __future__ import annotations

import contextlib
import itertools
import json
import math
import os
import threading
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

_seq = itertools.count()
_state = threading.local()

DEBUG = bool(os.environ.get("CYCLONEKIT_DEBUG"))


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "kind", "_parents", "_backward", "_seq", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.kind = "leaf"
        self._parents: tuple = ()
        self._backward = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ContractError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        raise TypeError("use take() for differentiable indexing")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, kind: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=np.float64)
    if DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise NonFiniteError(f"{kind} produced non-finite values from finite inputs")
    data.flags.writeable = False
    out.data = data
    out.kind = kind
    out._seq = next(_seq)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_trailing(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible "
                         "(only equal shapes or a trailing-axis operand are allowed)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (g, _unbroadcast(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (g, -_unbroadcast(g, b.shape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (g * bd, _unbroadcast(g * ad, b.shape)), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _result(x.data + c, (x,), lambda g: (g,), "add_scalar")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor, floor: float = 1e-12) -> Tensor:
    xd = np.maximum(x.data, floor)
    live = x.data >= floor
    return _result(np.log(xd), (x,), lambda g: (np.where(live, g / xd, 0.0),), "log")


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (np.where(pos, g, 0.0),), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * (xd * xd * xd))
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def backward_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _result(y, (x,), backward_fn, "gelu")


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def backward_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return _result(x.data.sum(axis=axes), (x,), backward_fn, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    shape = x.shape

    def backward_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape) / n,)

    return _result(x.data.sum(axis=axes) / n, (x,), backward_fn, "mean")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or ``a[..., m, k] @ b[..., k, n]`` with equal leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: need matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: leading dimensions differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), backward_fn, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != ax):
            raise DimensionError(f"concat: shapes {[t.shape for t in xs]} disagree off axis {axis}")
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([x.data for x in xs], axis=ax), xs, backward_fn, "concat")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % x.ndim
    if idx.ndim != 1 and ax != 0:
        raise ContractError("take: multi-dimensional indices are only supported along axis 0")
    shape = x.shape

    def backward_fn(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0) if idx.ndim == 1 else g)
        return (out,)

    return _result(np.take(x.data, idx, axis=ax), (x,), backward_fn, "take")


def embedding(table: Tensor, ids) -> Tensor:
    return take(table, ids, axis=0)


def expand(x: Tensor, lead: tuple) -> Tensor:
    """Repeat ``x`` over new leading axes: output shape is ``lead + x.shape``."""
    lead = tuple(lead)
    out = np.broadcast_to(x.data, lead + x.shape).copy()
    axes = tuple(range(len(lead)))
    return _result(out, (x,), lambda g: (g.sum(axis=axes),), "expand")


# ---------------------------------------------------------------- normalisation

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward_fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward_fn(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), backward_fn, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply per-feature scale and shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward_fn(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(xd.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + beta.data, (x, gamma, beta), backward_fn, "layer_norm")


# ---------------------------------------------------------------- backward

class Gradients(dict):
    """Maps each requires-grad leaf :class:`Tensor` to its gradient array."""

    def of(self, t: Tensor) -> np.ndarray:
        return self.get(t, np.zeros(t.shape))


def _reachable(root: Tensor) -> list[Tensor]:
    seen = {id(root)}
    stack = [root]
    nodes = []
    while stack:
        node = stack.pop()
        nodes.append(node)
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    return nodes


def backward(loss: Tensor, seed: np.ndarray | None = None) -> Gradients:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns the gradient of ``loss`` with respect to every reachable leaf that
    requires a gradient. Nodes are replayed in reverse creation order.
    """
    if seed is None and loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = Gradients()
    if not loss.requires_grad:
        return grads
    nodes = sorted(_reachable(loss), key=lambda t: t._seq, reverse=True)
    acc: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape) if seed is None else np.asarray(seed, dtype=np.float64)}
    for node in nodes:
        g = acc.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            grads[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in acc:
                acc[key] = acc[key] + pg
            else:
                acc[key] = np.array(pg, dtype=np.float64)
    return grads


def grad(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients keyed by parameter name; zeros for params the loss does not touch."""
    g = backward(loss)
    return {name: g.of(t) for name, t in params.items() if t.requires_grad}


# ---------------------------------------------------------------- optimiser

class Adam:
    """Adam with bias correction. Parameters are replaced, never mutated."""

    def __init__(self, lr: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = dict(params)
        for name, g in grads.items():
            p = params[name]
            if not p.requires_grad:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                v = self.v[name] = np.zeros_like(g)
            else:
                v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            update = m / denom
            update *= self.lr / c1
            out[name] = _leaf(p.data - update, True)
        return out


def _leaf(arr: np.ndarray, requires_grad: bool) -> Tensor:
    """Wrap a freshly allocated float64 array without copying."""
    t = Tensor.__new__(Tensor)
    arr.flags.writeable = False
    t.data = arr
    t.requires_grad = requires_grad
    t.kind = "leaf"
    t._parents = ()
    t._backward = None
    t._seq = next(_seq)
    return t


# ---------------------------------------------------------------- checkpoints

MANIFEST = "manifest.json"
BLOB = "params.f64"


def save_checkpoint(directory, params: Mapping[str, Tensor | np.ndarray], meta: dict | None = None,
                    trainable: Iterable[str] | None = None) -> Path:
    """Write ``manifest.json`` (name, shape, offset) plus one little-endian float64 blob."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    trainable = set(trainable) if trainable is not None else None
    entries, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = params[name]
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=np.float64)
        flag = (params[name].requires_grad if isinstance(params[name], Tensor) else True) \
            if trainable is None else name in trainable
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                         "count": int(arr.size), "trainable": bool(flag)})
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        offset += arr.size
    manifest = {"format": "cyclonekit-checkpoint/1", "dtype": "float64-le",
                "tensors": entries, "meta": meta or {}}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    (directory / BLOB).write_bytes(b"".join(chunks))
    return directory


def load_checkpoint(directory) -> tuple[dict[str, Tensor], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text(encoding="utf-8"))
    blob = np.frombuffer((directory / BLOB).read_bytes(), dtype="<f8")
    params = {}
    for e in manifest["tensors"]:
        arr = blob[e["offset"]:e["offset"] + e["count"]].astype(np.float64).reshape(e["shape"])
        params[e["name"]] = Tensor(arr, requires_grad=e["trainable"])
    return params, manifest.get("meta", {})

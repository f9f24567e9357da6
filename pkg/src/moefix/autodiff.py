"""Reverse-mode automatic differentiation over dense numpy arrays.

A small tape-based engine sized for a CPU transformer: ops executed inside an
active ``Graph`` record themselves in creation order (which is a topological
order by construction), and ``backward`` replays the tape once in reverse.
Outside a graph the same ops run forward-only at plain numpy speed.

Precision is a runtime choice: parameters carry float32 by default, float64
when gradient checks need headroom. Parameter gradients accumulate across
backward calls until ``zero_grads``.
"""
from __future__ import annotations

import itertools
import threading

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


_node_ids = itertools.count()
_tls = threading.local()


def _graph_stack() -> list["Graph"]:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


def active_graph() -> "Graph | None":
    stack = _graph_stack()
    return stack[-1] if stack else None


class Graph:
    """Recording tape for one forward/backward pass, confined to one thread."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        popped = _graph_stack().pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise RuntimeError("graphs must be exited in LIFO order")
        return False


def _coerce(data, dtype) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(DTYPES.get(dtype, dtype), copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """Dense n-d array, optionally a node in the differentiation graph.

    ``grad`` is None until a backward pass accumulates into it; None means zero.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        self.data = _coerce(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, id={self.node_id})"

    # arithmetic sugar; the heavy ops are module-level functions
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self))

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), -self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _node(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor(data)
    graph = active_graph()
    if graph is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        graph.nodes.append(out)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every parameter the scalar ``loss`` depends on.

    Walks the active graph's tape once, in reverse creation order. Intermediate
    gradients live in a per-call map; leaf (parameter) gradients accumulate
    into ``Tensor.grad`` so repeated calls sum until ``zero_grads``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    graph = active_graph()
    seed = np.ones_like(loss.data)
    if loss._backward is None:
        # constant or parameter loss: nothing upstream depends on it
        if loss.requires_grad:
            _leaf_accumulate(loss, seed)
        return
    if graph is None:
        raise RuntimeError("backward called outside the graph that recorded the loss")
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(graph.nodes):
        gout = grads.pop(id(node), None)
        if gout is None:
            continue
        for parent, pgrad in zip(node._parents, node._backward(gout)):
            if pgrad is None or not parent.requires_grad:
                continue
            if parent._backward is not None:
                seen = grads.get(id(parent))
                grads[id(parent)] = pgrad if seen is None else seen + pgrad
            else:
                _leaf_accumulate(parent, pgrad)


def _leaf_accumulate(leaf: Tensor, g: np.ndarray) -> None:
    if leaf.grad is None:
        leaf.grad = np.zeros_like(leaf.data)
    leaf.grad += g


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the pre-clip norm. Norm accumulated in float64 regardless of
    parameter precision.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    params = list(params)
    total = 0.0
    for p in params:
        if p.grad is None:
            raise ValueError("clip_global_norm requires populated gradients")
        total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = np.asarray(max_norm / norm, dtype=params[0].data.dtype)
        for p in params:
            p.grad *= scale
    return norm


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _node(a.data * b.data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _node(out, (a, b), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    def bwd(g):
        return (g.reshape(x.data.shape),)

    return _node(x.data.reshape(shape), (x,), bwd)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    def bwd(g):
        return (np.swapaxes(g, a, b),)

    return _node(np.swapaxes(x.data, a, b), (x,), bwd)


def transpose(x: Tensor) -> Tensor:
    """2-D transpose."""
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.data.shape}")
    return swapaxes(x, 0, 1)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape),)

    return _node(out, (x,), bwd)


def mean_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.data.shape),)

    return _node(out, (x,), bwd)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def bwd(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _node(out, (x,), bwd)


def softmax(x: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Numerically stable softmax; masked-out positions are exactly zero.

    ``mask`` is a boolean array broadcastable to ``x`` with True meaning keep;
    masked logits contribute as -inf. A fully masked row is an error.
    """
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.broadcast_to(mask, z.shape).any(axis=axis).all():
            raise ValueError("softmax: at least one row is fully masked")
        z = np.where(mask, z, -np.inf)
    zmax = z.max(axis=axis, keepdims=True)
    e = np.exp(z - zmax)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        # dx = y * (g - sum(g * y)); masked entries have y == 0, hence dx == 0
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _node(y, (x,), bwd)


def rms_norm(x: Tensor, weight: Tensor, eps: float) -> Tensor:
    """Root-mean-square normalization over the last axis with a learned scale."""
    d = x.data.shape[-1]
    if weight.data.shape != (d,):
        raise ShapeError(f"rms_norm weight shape {weight.data.shape} != ({d},)")
    if eps <= 0:
        raise ValueError(f"rms_norm eps must be positive, got {eps}")
    r = 1.0 / np.sqrt(np.mean(np.square(x.data), axis=-1, keepdims=True) + eps)
    out = x.data * r * weight.data

    def bwd(g):
        gw_term = g * weight.data
        # d/dx of x_i * r(x): r * g_i - x_i * r^3 * sum_j(g_j w_j x_j) / d
        s = (gw_term * x.data).sum(axis=-1, keepdims=True)
        gx = r * gw_term - x.data * (r**3) * (s / d)
        gw = (g * x.data * r).reshape(-1, d).sum(axis=0)
        return gx, gw

    return _node(out, (x, weight), bwd)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position encoding: rotate (first-half, second-half) feature pairs.

    ``cos``/``sin`` are constants broadcastable to x[..., :dim/2]; the backward
    pass is rotation by the opposite angle.
    """
    h = x.data.shape[-1] // 2
    x1, x2 = x.data[..., :h], x.data[..., h:]
    out = np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)

    def bwd(g):
        g1, g2 = g[..., :h], g[..., h:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return _node(out, (x,), bwd)


def take(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along the first axis; backward scatter-adds (duplicate ids sum)."""
    idx = np.asarray(idx)
    out = x.data[idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node(out, (x,), bwd)


def take_at(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather individual (row, col) entries of a matrix into a vector."""
    out = x.data[rows, cols]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _node(out, (x,), bwd)


def index_add(n_rows: int, idx: np.ndarray, values: Tensor) -> Tensor:
    """Scatter ``values`` rows into a fresh zero matrix of ``n_rows`` rows."""
    out = np.zeros((n_rows,) + values.data.shape[1:], dtype=values.data.dtype)
    np.add.at(out, idx, values.data)

    def bwd(g):
        return (g[idx],)

    return _node(out, (values,), bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray, loss_mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over unmasked positions.

    ``logits`` is [N, V]; ``targets`` integer ids [N]; ``loss_mask`` boolean [N]
    (None = all positions count). Fused log-softmax keeps the backward cheap.
    """
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, V] logits, got shape {z.shape}")
    n, v = z.shape
    targets = np.asarray(targets)
    mask = np.ones(n, dtype=bool) if loss_mask is None else np.asarray(loss_mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: all positions are masked out")
    active = targets[mask]
    if active.size and (active.min() < 0 or active.max() >= v):
        bad = active[(active < 0) | (active >= v)][0]
        raise ValueError(f"cross_entropy: target id {bad} outside vocabulary of size {v}")

    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=-1))
    nll = lse - z[np.arange(n), targets]
    out = np.asarray((nll * mask).sum() / count, dtype=z.dtype)

    def bwd(g):
        p = np.exp(z - zmax)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), targets] -= 1.0
        p *= (mask * (g / count))[:, None]
        return (p,)

    return _node(out, (logits,), bwd)

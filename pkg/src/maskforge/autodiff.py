"""Minimal dense-tensor reverse-mode differentiation over numpy arrays.

Design notes:

- Storage defaults to float32; reductions (losses, norm statistics)
  accumulate in float64 regardless of storage dtype. Building a graph
  from float64 tensors runs the whole pipeline in float64, which the
  gradient-check suite uses for tight tolerances.
- A backward pass accumulates into per-pass buffers and only then adds
  into each tensor's persistent ``grad``, so running backward twice
  without zeroing doubles every gradient.
- Creation order is a valid reverse-topological order: backward visits
  reachable nodes by descending ``node_id``, each exactly once.
"""

from __future__ import annotations

import itertools
import os
from contextlib import contextmanager

import numpy as np

from .kernels import (depthwise_conv1d_backward, depthwise_conv1d_forward,
                      layer_norm_backward as ln_backward, layer_norm_forward as ln_forward)


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class GraphError(AutodiffError):
    pass


_node_ids = itertools.count()
_grad_enabled = True
_debug_checks = os.environ.get("MASKFORGE_DEBUG", "0") == "1"


def set_debug_checks(on: bool) -> None:
    """Enable rejection of non-finite op inputs (off by default for speed)."""
    global _debug_checks
    _debug_checks = bool(on)


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "node_id")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.node_id = next(_node_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad=False, dtype=np.float32) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


def constant(data, dtype=np.float32) -> Tensor:
    return tensor(data, requires_grad=False, dtype=dtype)


def _check_inputs(op: str, *tensors: Tensor) -> None:
    if _debug_checks:
        for t in tensors:
            if not np.all(np.isfinite(t.data)):
                raise NonFiniteError(f"{op}: non-finite input detected")


def _make(op, data, parents, backward_fn):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn, op=op)
    return Tensor(data, requires_grad=False, op=op)


def backward(root: Tensor) -> None:
    """Populate ``grad`` with d(root)/d(tensor) for every reachable tensor.

    ``root`` must be scalar (one element). Gradients add into any
    existing ``grad`` buffers.
    """
    if root.data.size != 1:
        raise GraphError(f"backward: root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        return

    # Reachable requires_grad subgraph, processed in descending creation
    # order (children strictly after parents, so this is reverse-topo).
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append(p)
    order = sorted(seen.values(), key=lambda n: n.node_id, reverse=True)

    seed = np.ones_like(root.data)
    local: dict[int, np.ndarray] = {id(root): seed}
    adopted: set[int] = {id(seed)}

    def accumulate(target: Tensor, g: np.ndarray) -> None:
        tid = id(target)
        buf = local.get(tid)
        if buf is None:
            # Adopt only arrays we exclusively own: views may alias an
            # already-finalized node's grad buffer, and one object must
            # never serve two targets.
            if id(g) in adopted or not (g.flags.owndata and g.flags.writeable):
                g = np.array(g)
            local[tid] = g
            adopted.add(id(g))
        else:
            buf += g

    for node in order:
        g = local.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g if g.flags.owndata and g.flags.writeable else g.copy()
        else:
            node.grad += g
        if node.backward_fn is not None:
            for parent, gp in zip(node.parents, node.backward_fn(g)):
                if gp is not None and parent.requires_grad:
                    accumulate(parent, gp)


# ---------------------------------------------------------------------------
# FLOPs instrumentation (matmul and depthwise conv multiply-adds, x2)


class FlopCounter:
    def __init__(self):
        self.total = 0
        self.by_scope = {}

    def add(self, scope: str, n: int) -> None:
        self.total += n
        self.by_scope[scope] = self.by_scope.get(scope, 0) + n


_flop_counter: FlopCounter | None = None
_flop_scope: list[str] = []


@contextmanager
def count_flops():
    global _flop_counter
    prev = _flop_counter
    _flop_counter = counter = FlopCounter()
    try:
        yield counter
    finally:
        _flop_counter = prev


@contextmanager
def flops_scope(name: str):
    _flop_scope.append(name)
    try:
        yield
    finally:
        _flop_scope.pop()


def _record_flops(n: int) -> None:
    if _flop_counter is not None:
        _flop_counter.add("/".join(_flop_scope) if _flop_scope else "", n)


# ---------------------------------------------------------------------------
# Broadcasting helpers


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} are not broadcast-compatible")


# ---------------------------------------------------------------------------
# Primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_inputs("add", a, b)
    _broadcast_shape("add", a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make("add", out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_inputs("mul", a, b)
    _broadcast_shape("mul", a, b)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", out, (a, b), bw)


def scale(x: Tensor, mul_by: float, add_to: float = 0.0) -> Tensor:
    _check_inputs("scale", x)
    out = x.data * x.data.dtype.type(mul_by)
    if add_to != 0.0:
        out = out + x.data.dtype.type(add_to)

    def bw(g):
        return (g * x.data.dtype.type(mul_by),)

    return _make("scale", out, (x,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_inputs("matmul", a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-d, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {ad.shape} vs {bd.shape}")
    if bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {ad.shape} vs {bd.shape}")
    out = ad @ bd
    n, m, p = ad.shape[-2], ad.shape[-1], bd.shape[-1]
    batch = int(np.prod(ad.shape[:-2], dtype=np.int64)) if ad.ndim > 2 else 1
    _record_flops(2 * batch * n * m * p)

    def bw(g):
        ga = g @ bd.swapaxes(-1, -2) if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, m).T @ g.reshape(-1, p)
        else:
            gb = ad.swapaxes(-1, -2) @ g
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    _check_inputs("concat", *tensors)
    base = list(tensors[0].data.shape)
    for t in tensors[1:]:
        s = list(t.data.shape)
        s[axis] = base[axis]
        if s != base:
            raise ShapeError(f"concat: shapes {tensors[0].data.shape} and {t.data.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", out, tuple(tensors), bw)


def slice_(x: Tensor, key) -> Tensor:
    _check_inputs("slice", x)
    out = x.data[key]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _make("slice", out, (x,), bw)


def transpose(x: Tensor, axes) -> Tensor:
    _check_inputs("transpose", x)
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _make("transpose", out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    _check_inputs("reshape", x)
    out = x.data.reshape(shape)
    orig = x.data.shape

    def bw(g):
        return (g.reshape(orig),)

    return _make("reshape", out, (x,), bw)


def broadcast(x: Tensor, shape) -> Tensor:
    _check_inputs("broadcast", x)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {x.data.shape} to {tuple(shape)}")

    def bw(g):
        return (_unbroadcast(g, x.data.shape),)

    return _make("broadcast", out, (x,), bw)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # exp may overflow to inf for very negative inputs; 1/(1+inf) is the
    # correct 0.0, so just silence the warning.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-v))


def sigmoid(x: Tensor) -> Tensor:
    _check_inputs("sigmoid", x)
    s = _sigmoid(x.data)

    def bw(g):
        t = 1.0 - s
        t *= s
        t *= g
        return (t,)

    return _make("sigmoid", s, (x,), bw)


def swish(x: Tensor) -> Tensor:
    _check_inputs("swish", x)
    s = _sigmoid(x.data)
    out = x.data * s

    def bw(g):
        t = 1.0 - s
        t *= out
        t += s
        t *= g
        return (t,)

    return _make("swish", out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    _check_inputs("relu", x)
    out = np.maximum(x.data, 0)

    def bw(g):
        return (g * (x.data > 0),)

    return _make("relu", out, (x,), bw)


def glu(x: Tensor, axis: int = -1) -> Tensor:
    _check_inputs("glu", x)
    n = x.data.shape[axis]
    if n % 2 != 0:
        raise ShapeError(f"glu: axis {axis} extent {n} of {x.data.shape} is odd")
    a, b = np.split(x.data, 2, axis=axis)
    s = _sigmoid(b)
    out = a * s

    def bw(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=axis),)

    return _make("glu", out, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_inputs("softmax", x)
    y = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def bw(g):
        if axis in (-1, g.ndim - 1):
            k = g.shape[-1]
            dot = np.einsum("nk,nk->n", g.reshape(-1, k), y.reshape(-1, k)).reshape(g.shape[:-1] + (1,))
        else:
            dot = np.sum(g * y, axis=axis, keepdims=True)
        gx = g - dot.astype(y.dtype)
        gx *= y
        return (gx,)

    return _make("softmax", y, (x,), bw)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is 1 strictly inside and 0 at/beyond bounds."""
    _check_inputs("clamp", x)
    out = np.clip(x.data, lo, hi)

    def bw(g):
        return (g * ((x.data > lo) & (x.data < hi)),)

    return _make("clamp", out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, virtual_count: int | None = None) -> Tensor:
    """Normalize over the last axis.

    ``virtual_count`` is the divisor for the statistics; extracted models
    pass the pre-pruning width so positions sliced away (which held exact
    zeros) still count toward mean and variance.
    """
    _check_inputs("layer_norm", x, gamma, beta)
    d = x.data.shape[-1]
    v = d if virtual_count is None else int(virtual_count)
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layer_norm: params {gamma.data.shape}/{beta.data.shape} do not match feature dim {d} of {x.data.shape}")
    shape = x.data.shape
    flat = np.ascontiguousarray(x.data).reshape(-1, d)
    out2, xhat, inv = ln_forward(flat, gamma.data, beta.data, v, eps)

    def bw(g):
        g2 = np.ascontiguousarray(g).reshape(-1, d)
        gx, gg, gb = ln_backward(g2, xhat, inv, gamma.data, v)
        return (
            gx.reshape(shape) if x.requires_grad else None,
            gg if gamma.requires_grad else None,
            gb if beta.requires_grad else None,
        )

    return _make("layer_norm", out2.reshape(shape), (x, gamma, beta), bw)


def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-channel conv over the time axis of (B, T, C); zero same-padding."""
    _check_inputs("depthwise_conv1d", x, w, b)
    if x.data.ndim != 3:
        raise ShapeError(f"depthwise_conv1d: input must be (B,T,C), got {x.data.shape}")
    C = x.data.shape[-1]
    k = w.data.shape[-1]
    if w.data.shape != (C, k) or b.data.shape != (C,):
        raise ShapeError(f"depthwise_conv1d: weights {w.data.shape}/{b.data.shape} do not match channels {C} of {x.data.shape}")
    if k % 2 != 1:
        raise ShapeError(f"depthwise_conv1d: kernel size {k} must be odd")
    out = depthwise_conv1d_forward(x.data, w.data, b.data)
    B, T, _ = x.data.shape
    _record_flops(2 * B * T * C * k)

    def bw(g):
        g = np.ascontiguousarray(g)
        gx, gw, gb = depthwise_conv1d_backward(g, x.data, w.data)
        return (gx if x.requires_grad else None, gw if w.requires_grad else None, gb if b.requires_grad else None)

    return _make("depthwise_conv1d", out, (x, w, b), bw)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check_inputs("sum", x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g.reshape((1,) * x.data.ndim), x.data.shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape),)

    return _make("sum", out, (x,), bw)


def mean_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check_inputs("mean", x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)
    count = x.data.size if axis is None else x.data.shape[axis]

    def bw(g):
        g = g / x.data.dtype.type(count)
        if axis is None:
            return (np.broadcast_to(g.reshape((1,) * x.data.ndim), x.data.shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape),)

    return _make("mean", out, (x,), bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference over all elements, as a scalar."""
    _check_inputs("mse", a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse: shapes {a.data.shape} and {b.data.shape} differ")
    diff = a.data - b.data
    n = diff.size
    val = np.sum(np.multiply(diff, diff, dtype=np.float64)) / n
    out = np.asarray(val, dtype=a.data.dtype)

    def bw(g):
        gd = diff * (2.0 * float(g) / n)
        gd = gd.astype(a.data.dtype, copy=False)
        return (gd if a.requires_grad else None, -gd if b.requires_grad else None)

    return _make("mse", out, (a, b), bw)


def cross_entropy_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over all frames; labels are integer class ids."""
    _check_inputs("cross_entropy_with_logits", logits)
    ld = logits.data
    labels = np.asarray(labels)
    if labels.shape != ld.shape[:-1]:
        raise ShapeError(f"cross_entropy_with_logits: labels {labels.shape} do not match logits {ld.shape}")
    K = ld.shape[-1]
    flat = ld.reshape(-1, K)
    y = labels.reshape(-1).astype(np.int64)
    if y.size == 0:
        raise ShapeError("cross_entropy_with_logits: empty batch")
    if y.min() < 0 or y.max() >= K:
        raise ShapeError(f"cross_entropy_with_logits: labels out of range [0,{K})")
    n = flat.shape[0]
    m = flat.max(axis=-1, keepdims=True)
    z = flat - m
    e = np.exp(z)
    s = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    logp = z.astype(np.float64) - np.log(s)
    val = -logp[np.arange(n), y].mean()
    out = np.asarray(val, dtype=ld.dtype)
    probs = (e / s.astype(ld.dtype)).astype(ld.dtype)

    def bw(g):
        gl = probs.copy()
        gl[np.arange(n), y] -= 1.0
        gl *= ld.dtype.type(float(g) / n)
        return (gl.reshape(ld.shape),)

    return _make("cross_entropy_with_logits", out, (logits,), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused x @ w + b (one graph node; b broadcasts over leading axes)."""
    if b is None:
        return matmul(x, w)
    _check_inputs("linear", x, w, b)
    xd, wd = x.data, w.data
    if xd.ndim < 2 or wd.ndim != 2 or xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"linear: shapes {xd.shape} and {wd.shape} do not conform")
    if b.data.shape != (wd.shape[1],):
        raise ShapeError(f"linear: bias {b.data.shape} does not match output dim {wd.shape[1]}")
    out = xd @ wd
    out += b.data
    m, p = wd.shape
    n = xd.shape[-2]
    batch = int(np.prod(xd.shape[:-2], dtype=np.int64)) if xd.ndim > 2 else 1
    _record_flops(2 * batch * n * m * p)

    def bw(g):
        ga = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, m).T @ g.reshape(-1, p) if w.requires_grad else None
        gb = np.sum(g.reshape(-1, p), axis=0, dtype=np.float64).astype(b.data.dtype) if b.requires_grad else None
        return ga, gw, gb

    return _make("linear", out, (x, w, b), bw)


PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "concat": concat,
    "slice": slice_,
    "transpose": transpose,
    "reshape": reshape,
    "broadcast": broadcast,
    "depthwise_conv1d": depthwise_conv1d,
    "layer_norm": layer_norm,
    "softmax": softmax,
    "sigmoid": sigmoid,
    "swish": swish,
    "glu": glu,
    "relu": relu,
    "mse": mse,
    "cross_entropy_with_logits": cross_entropy_with_logits,
    "sum": sum_,
    "mean": mean_,
    "clamp": clamp,
}


def primitive_forward(op_tag: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by tag; unknown tags are rejected."""
    try:
        fn = PRIMITIVES[op_tag]
    except KeyError:
        raise AutodiffError(f"unknown primitive {op_tag!r}")
    return fn(*inputs, **kwargs)


def finite_difference_gradient(f, x: Tensor, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time.

    ``f`` receives a Tensor and must return a scalar Tensor (or float)
    deterministically; fix any noise sources before calling.
    """
    if h <= 0:
        raise ValueError("finite_difference_gradient: h must be positive")
    base = x.data
    grad = np.zeros(base.shape, dtype=np.float64)
    flat = grad.reshape(-1)
    for i in range(base.size):
        for sign in (1.0, -1.0):
            pert = base.copy()
            pert.reshape(-1)[i] += sign * h
            with no_grad():
                val = f(Tensor(pert))
            val = float(val.data) if isinstance(val, Tensor) else float(val)
            flat[i] += sign * val
    flat /= 2.0 * h
    return grad

"""Minimal tape-free reverse-mode differentiation over float64 numpy arrays.

Each op returns a :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients. ``Tensor.backward`` sorts the
graph topologically and accumulates gradients into leaves that require them.

Every op checks shapes and finiteness. Leaves carry a version counter that the
optimiser bumps on each in-place update; backward refuses to run through a
graph whose leaves changed after the forward pass.
"""

from __future__ import annotations

import math

import numpy as np

from ifnas import kernels


class NumericalFault(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "_backward", "_saved",
                 "version", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self._backward = None
        self._saved = ()
        self.version = 0
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def bump_version(self):
        self.version += 1

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, v in zip(node.parents, node._saved):
                if parent.version != v:
                    raise GraphError(
                        f"{parent!r} was modified after the forward pass; rebuild the graph")
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _make(data, parents, backward, op):
    finite = math.isfinite(data) if np.ndim(data) == 0 else np.isfinite(data).all()
    if not finite:
        raise NumericalFault(f"non-finite value produced by {op}")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._saved = tuple(p.version for p in parents)
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op, *ts):
    s = ts[0].shape
    for t in ts[1:]:
        if t.shape != s:
            raise ShapeError(f"{op}: shape mismatch {s} vs {t.shape}")


# elementwise and reductions

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def accumulate(terms: list[Tensor]) -> Tensor:
    """n-ary sum of equally shaped tensors."""
    if not terms:
        raise ShapeError("accumulate: empty term list")
    _same_shape("accumulate", *terms)
    data = terms[0].data.copy()
    for t in terms[1:]:
        data += t.data
    return _make(data, tuple(terms), lambda g: tuple(g for _ in terms), "accumulate")


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply ``x`` by the 0-d tensor ``s``."""
    if s.data.ndim != 0:
        raise ShapeError(f"scale: factor must be 0-d, got {s.shape}")
    xd, sd = x.data, s.data

    def back(g):
        return (g * sd, np.asarray(np.sum(g * xd)))

    return _make(xd * sd, (x, s), back, "scale")


def mul_const(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,), "mul_const")


def div_scalar(x: Tensor, s: Tensor) -> Tensor:
    if s.data.ndim != 0:
        raise ShapeError(f"div_scalar: divisor must be 0-d, got {s.shape}")
    xd, sd = x.data, float(s.data)
    with np.errstate(divide="ignore", invalid="ignore"):  # reported by _make
        out = xd / sd
    return _make(out, (x, s), lambda g: (g / sd, np.asarray(-np.sum(g * out) / sd)), "div_scalar")


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    m = x.data > 0
    return _make(np.where(m, x.data, 0.0), (x,), lambda g: (g * m,), "relu")


def log1p(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log1p(xd)
    return _make(y, (x,), lambda g: (g / (1.0 + xd),), "log1p")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),),
                 "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make(np.asarray(x.data.mean()), (x,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")


def stack(scalars: list[Tensor]) -> Tensor:
    """Stack 0-d tensors into a vector."""
    for t in scalars:
        if t.data.ndim != 0:
            raise ShapeError(f"stack: expected 0-d tensors, got {t.shape}")
    data = np.array([t.data for t in scalars], dtype=np.float64)
    return _make(data, tuple(scalars), lambda g: tuple(g[i] for i in range(len(scalars))),
                 "stack")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


# network ops

def depthwise_conv3x3(x: Tensor, w: Tensor) -> Tensor:
    if x.data.ndim != 4 or w.shape != (x.shape[1], 3, 3):
        raise ShapeError(f"depthwise_conv3x3: input {x.shape} with weight {w.shape}")
    xd, wd = x.data, w.data

    def back(g):
        gx = kernels.depthwise3x3_grad_input(g, wd) if x.requires_grad else None
        gw = kernels.depthwise3x3_grad_weight(xd, g) if w.requires_grad else None
        return gx, gw

    return _make(kernels.depthwise3x3(xd, wd), (x, w), back, "depthwise_conv3x3")


def pointwise_conv(x: Tensor, w: Tensor) -> Tensor:
    """1x1 convolution, ``w`` of shape (out_channels, in_channels)."""
    if x.data.ndim != 4 or w.data.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"pointwise_conv: input {x.shape} with weight {w.shape}")
    xd, wd = x.data, w.data
    b, c, h, wdt = xd.shape
    xm = xd.transpose(0, 2, 3, 1).reshape(-1, c)
    y = (xm @ wd.T).reshape(b, h, wdt, -1).transpose(0, 3, 1, 2)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, wd.shape[0])
        gx = (gm @ wd).reshape(b, h, wdt, c).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = gm.T @ xm if w.requires_grad else None
        return gx, gw

    return _make(np.ascontiguousarray(y), (x, w), back, "pointwise_conv")


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map on (batch, features): ``x @ w.T + b``."""
    if x.data.ndim != 2 or w.data.ndim != 2 or w.shape[1] != x.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"dense: input {x.shape}, weight {w.shape}, bias {b.shape}")
    xd, wd = x.data, w.data

    def back(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _make(xd @ wd.T + b.data, (x, w, b), back, "dense")


def subsample2(x: Tensor) -> Tensor:
    """Stride-2 spatial subsampling (keeps even rows and columns)."""
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        gx[:, :, ::2, ::2] = g
        return (gx,)

    return _make(np.ascontiguousarray(x.data[:, :, ::2, ::2]), (x,), back, "subsample2")


def global_avg_pool(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return _make(x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),),
                 "global_avg_pool")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (batch, classes) logits."""
    z = logits.data
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy: logits {z.shape} with labels {labels.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    n = z.shape[0]
    idx = np.arange(n)
    loss = -np.mean(logp[idx, labels])

    def back(g):
        d = p.copy()
        d[idx, labels] -= 1.0
        return (d * (g / n),)

    return _make(np.asarray(loss), (logits,), back, "cross_entropy")


def zeros_like_shape(shape) -> Tensor:
    return Tensor(np.zeros(shape))

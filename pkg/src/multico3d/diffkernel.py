"""Dense tensor arithmetic with reverse-mode differentiation.

Values are plain numpy arrays. A :class:`Node` wraps one value together with
the parents it was computed from and a closure that pushes its gradient back
to them. Gradients are accumulated in creation order (reversed), which is a
valid topological order and keeps backward bit-reproducible.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

EPS = 1e-7

_ids = itertools.count()


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class EvaluationError(ArithmeticError):
    pass


class Node:
    __slots__ = ("value", "parents", "op", "grad", "requires_grad", "_backward", "_id")

    def __init__(self, value, parents=(), op="leaf", backward=None, requires_grad=None):
        self.value = np.asarray(value)
        if self.value.dtype.kind not in "f":
            self.value = self.value.astype(np.float64)
        self.parents = tuple(parents)
        self.op = op
        self._backward = backward
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.grad = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Node):
    __slots__ = ("name", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        super().__init__(np.array(value, copy=True), op="param", requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def const(value, dtype=None) -> Node:
    arr = np.asarray(value, dtype=dtype)
    return Node(arr, requires_grad=False, op="const")


def _as_node(x, like: Node | None = None) -> Node:
    if isinstance(x, Node):
        return x
    dtype = like.dtype if like is not None else None
    return const(np.asarray(x, dtype=dtype))


def _accumulate(node: Node, g):
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=node.value.dtype, copy=True)
    else:
        node.grad += g


def _make(value, parents, op, backward) -> Node:
    return Node(value, parents, op, backward)


# ---------------------------------------------------------------- elementwise

def _binary_shapes(op, a: Node, b: Node):
    if a.shape == b.shape or a.value.ndim == 0 or b.value.ndim == 0:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible (only equal shapes or scalars)")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b) -> Node:
    a = _as_node(a, b if isinstance(b, Node) else None)
    b = _as_node(b, a)
    _binary_shapes("add", a, b)

    def backward(out):
        _accumulate(a, _reduce_to(out.grad, a.shape))
        _accumulate(b, _reduce_to(out.grad, b.shape))

    return _make(a.value + b.value, (a, b), "add", backward)


def sub(a, b) -> Node:
    a = _as_node(a, b if isinstance(b, Node) else None)
    b = _as_node(b, a)
    _binary_shapes("sub", a, b)

    def backward(out):
        _accumulate(a, _reduce_to(out.grad, a.shape))
        _accumulate(b, _reduce_to(-out.grad, b.shape))

    return _make(a.value - b.value, (a, b), "sub", backward)


def mul(a, b) -> Node:
    a = _as_node(a, b if isinstance(b, Node) else None)
    b = _as_node(b, a)
    _binary_shapes("mul", a, b)

    def backward(out):
        if a.requires_grad:
            _accumulate(a, _reduce_to(out.grad * b.value, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(out.grad * a.value, b.shape))

    return _make(a.value * b.value, (a, b), "mul", backward)


def div(a, b) -> Node:
    a = _as_node(a, b if isinstance(b, Node) else None)
    b = _as_node(b, a)
    _binary_shapes("div", a, b)

    def backward(out):
        if a.requires_grad:
            _accumulate(a, _reduce_to(out.grad / b.value, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(-out.grad * a.value / (b.value * b.value), b.shape))

    return _make(a.value / b.value, (a, b), "div", backward)


def neg(a: Node) -> Node:
    def backward(out):
        _accumulate(a, -out.grad)

    return _make(-a.value, (a,), "neg", backward)


def relu(a: Node) -> Node:
    mask = a.value > 0

    def backward(out):
        _accumulate(a, out.grad * mask)

    return _make(np.where(mask, a.value, 0).astype(a.dtype), (a,), "relu", backward)


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Node) -> Node:
    s = _stable_sigmoid(a.value)

    def backward(out):
        _accumulate(a, out.grad * s * (1 - s))

    return _make(s, (a,), "sigmoid", backward)


def log(a: Node, clamp: bool = True, eps: float = EPS) -> Node:
    """Natural log. With ``clamp`` the input is clipped to [eps, 1 - eps] and
    the clipped value is used in both the forward value and the derivative."""
    x = np.clip(a.value, eps, 1 - eps) if clamp else a.value
    if not clamp and np.any(x <= 0):
        raise EvaluationError("log of non-positive value")

    def backward(out):
        _accumulate(a, out.grad / x)

    return _make(np.log(x), (a,), "log", backward)


def exp(a: Node) -> Node:
    e = np.exp(a.value)

    def backward(out):
        _accumulate(a, out.grad * e)

    return _make(e, (a,), "exp", backward)


# ---------------------------------------------------------------- reductions

def sum(a: Node, axis=None) -> Node:  # noqa: A001
    v = np.sum(a.value, axis=axis)

    def backward(out):
        g = out.grad
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(v), (a,), "sum", backward)


def mean(a: Node, axis=None) -> Node:
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    v = np.mean(a.value, axis=axis)

    def backward(out):
        g = out.grad / n
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(v), (a,), "mean", backward)


def logsumexp(a: Node, axis: int = -1) -> Node:
    m = np.max(a.value, axis=axis, keepdims=True)
    e = np.exp(a.value - m)
    s = np.sum(e, axis=axis, keepdims=True)
    v = (np.log(s) + m).squeeze(axis)
    soft = e / s

    def backward(out):
        _accumulate(a, np.expand_dims(out.grad, axis) * soft)

    return _make(v, (a,), "logsumexp", backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Node:
    a = _as_node(a)
    b = _as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def backward(out):
        if a.requires_grad:
            _accumulate(a, out.grad @ b.value.T)
        if b.requires_grad:
            _accumulate(b, a.value.T @ out.grad)

    return _make(a.value @ b.value, (a, b), "matmul", backward)


def _im2col(xp, kh, kw, H, W):
    N, C = xp.shape[:2]
    cols = np.empty((C, kh, kw, N, H, W), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + H, j:j + W]
    return cols.reshape(C * kh * kw, N * H * W)


def conv2d(x: Node, w: Node, b: Node | None = None) -> Node:
    """Stride-1 zero-padded ('same') convolution.

    x is [C, H, W] or [N, C, H, W]; w is [O, C, kh, kw] with odd kernel sides;
    b is [O]. Lowered to one matrix product over unfolded kernel taps.
    """
    squeeze = x.value.ndim == 3
    xv = x.value[None] if squeeze else x.value
    if xv.ndim != 4 or w.value.ndim != 4 or xv.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} and kernel {w.shape} are incompatible")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
    O, C, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel sides must be odd, got {w.shape}")
    N, _, H, W = xv.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(xv, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xv
    if kh == 1 and kw == 1:
        cols = xv.transpose(1, 0, 2, 3).reshape(C, N * H * W)
    else:
        cols = _im2col(xp, kh, kw, H, W)
    wm = w.value.reshape(O, -1)
    out = wm @ cols
    if b is not None:
        out += b.value[:, None]
    out = out.reshape(O, N, H, W).transpose(1, 0, 2, 3)

    parents = (x, w) if b is None else (x, w, b)

    def backward(out_node):
        g = out_node.grad
        g = g[None] if squeeze else g
        gm = g.transpose(1, 0, 2, 3).reshape(O, N * H * W)
        if w.requires_grad:
            _accumulate(w, (gm @ cols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accumulate(b, gm.sum(axis=1))
        if x.requires_grad:
            gcols = (wm.T @ gm).reshape(C, kh, kw, N, H, W)
            gxp = np.zeros((C, N, H + 2 * ph, W + 2 * pw), dtype=gcols.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + H, j:j + W] += gcols[:, i, j]
            gx = gxp[:, :, ph:ph + H, pw:pw + W].transpose(1, 0, 2, 3)
            _accumulate(x, gx[0] if squeeze else gx)

    out = np.ascontiguousarray(out)
    return _make(out[0] if squeeze else out, parents, "conv2d", backward)


def upsample2x(x: Node) -> Node:
    """Nearest-neighbour 2x upsampling over the last two axes."""
    v = np.repeat(np.repeat(x.value, 2, axis=-2), 2, axis=-1)

    def backward(out):
        g = out.grad
        s = g.shape
        g = g.reshape(*s[:-2], s[-2] // 2, 2, s[-1] // 2, 2).sum(axis=(-3, -1))
        _accumulate(x, g)

    return _make(v, (x,), "upsample2x", backward)


def maxpool2x(x: Node) -> Node:
    """2x2 max pooling over the last two axes; ties route gradient to the first max."""
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise DimensionError(f"maxpool2x: spatial extents {x.shape[-2:]} must be even")
    lead = x.shape[:-2]
    blocks = x.value.reshape(*lead, H // 2, 2, W // 2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, H // 2, W // 2, 4)
    arg = np.argmax(blocks, axis=-1)
    v = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(out):
        gb = np.zeros(blocks.shape, dtype=x.dtype)
        np.put_along_axis(gb, arg[..., None], out.grad[..., None], axis=-1)
        gb = gb.reshape(*lead, H // 2, W // 2, 2, 2)
        gb = np.moveaxis(gb, -2, -3).reshape(x.shape)
        _accumulate(x, gb)

    return _make(v, (x,), "maxpool2x", backward)


# ---------------------------------------------------------------- indexing / layout

def reshape(x: Node, shape) -> Node:
    def backward(out):
        _accumulate(x, out.grad.reshape(x.shape))

    return _make(x.value.reshape(shape), (x,), "reshape", backward)


def transpose(x: Node, axes=None) -> Node:
    axes = tuple(reversed(range(x.value.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)

    def backward(out):
        _accumulate(x, np.transpose(out.grad, inv))

    return _make(np.transpose(x.value, axes), (x,), "transpose", backward)


def gather_rows(x: Node, index) -> Node:
    """Rows ``x[index]`` of a 2D node; repeated indices accumulate gradient."""
    idx = np.asarray(index, dtype=np.intp)
    if x.value.ndim != 2:
        raise DimensionError(f"gather_rows: expected 2D input, got {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError(f"gather_rows: index out of range for {x.shape}")

    def backward(out):
        g = np.zeros_like(x.value)
        np.add.at(g, idx, out.grad)
        _accumulate(x, g)

    return _make(x.value[idx], (x,), "gather_rows", backward)


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = list(nodes)
    try:
        v = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[n.shape for n in nodes]} along axis {axis}") from exc
    bounds = np.cumsum([0] + [n.shape[axis] for n in nodes])

    def backward(out):
        for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            if n.requires_grad:
                _accumulate(n, np.take(out.grad, np.arange(lo, hi), axis=axis))

    return _make(v, nodes, "concat", backward)


def slice(x: Node, key) -> Node:  # noqa: A001
    """Basic (non-fancy) indexing ``x[key]``."""
    v = x.value[key]

    def backward(out):
        g = np.zeros_like(x.value)
        g[key] += out.grad
        _accumulate(x, g)

    return _make(np.array(v), (x,), "slice", backward)


def pairwise_distance(a: Node, b: Node) -> Node:
    """Euclidean distances between rows: [P, E] x [Q, E] -> [P, Q].

    The derivative at zero distance is taken as 0.
    """
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_distance: shapes {a.shape} and {b.shape} are incompatible")
    diff = a.value[:, None, :] - b.value[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    safe = np.where(d > 0, d, 1.0)

    def backward(out):
        coef = np.where(d > 0, out.grad / safe, 0.0)[..., None] * diff
        if a.requires_grad:
            _accumulate(a, coef.sum(axis=1))
        if b.requires_grad:
            _accumulate(b, -coef.sum(axis=0))

    return _make(d, (a, b), "pairwise_distance", backward)


def row_distance(a: Node, b: Node) -> Node:
    """Euclidean distance between matching rows: [P, E] x [P, E] -> [P]."""
    if a.shape != b.shape or a.value.ndim != 2:
        raise DimensionError(f"row_distance: shapes {a.shape} and {b.shape} are incompatible")
    diff = a.value - b.value
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    safe = np.where(d > 0, d, 1.0)

    def backward(out):
        coef = np.where(d > 0, out.grad / safe, 0.0)[:, None] * diff
        _accumulate(a, coef)
        _accumulate(b, -coef)

    return _make(d, (a, b), "row_distance", backward)


def normalize_rows(x: Node, eps: float = 1e-12) -> Node:
    """Scale each row of a 2D node to unit Euclidean norm."""
    if x.value.ndim != 2:
        raise DimensionError(f"normalize_rows: expected 2D input, got {x.shape}")
    n = np.sqrt(np.sum(x.value * x.value, axis=1, keepdims=True)) + eps
    y = x.value / n

    def backward(out):
        g = out.grad
        _accumulate(x, (g - y * np.sum(g * y, axis=1, keepdims=True)) / n)

    return _make(y, (x,), "normalize_rows", backward)


def dropout(x: Node, rate: float, rng: np.random.Generator | None) -> Node:
    """Inverted dropout; identity when ``rng`` is None or rate is 0."""
    if rng is None or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, const(keep))


# ---------------------------------------------------------------- backward

def _topo(root: Node) -> list[Node]:
    seen = {}
    stack = [root]
    while stack:
        n = stack.pop()
        if n._id in seen or not n.requires_grad:
            continue
        seen[n._id] = n
        stack.extend(n.parents)
    return [seen[k] for k in sorted(seen, reverse=True)]


def graph_ops(root: Node) -> set[str]:
    """Names of every op reachable from ``root`` (including constant subgraphs)."""
    ops, seen, stack = set(), set(), [root]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        ops.add(n.op)
        stack.extend(n.parents)
    return ops


def backward(root: Node) -> dict[str, np.ndarray]:
    """Accumulate d(root)/d(node) into every reachable node requiring grad.

    Gradients start from zero on every call. Returns the gradients of the
    reachable :class:`Parameter` nodes by name.
    """
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topo(root)
    for n in order:
        n.grad = None
    root.grad = np.ones_like(root.value)
    grads = {}
    for n in order:
        if n._backward is not None and n.grad is not None:
            n._backward(n)
        if isinstance(n, Parameter):
            grads[n.name] = n.grad
    # free intermediate buffers
    for n in order:
        if not isinstance(n, Parameter):
            n.grad = None
    return grads


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    tolerance: float
    max_error: float = field(init=False)

    def __post_init__(self):
        self.max_error = float(np.max(self.errors)) if self.errors.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def relative_error(a, n, floor: float = 1e-8):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(fn: Callable[[Node], Node], point, step: float = 1e-5, tolerance: float = 1e-4,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``fn`` at ``point`` against
    central differences. ``floor`` bounds the relative-error denominator so
    coordinates with vanishing gradient are judged on absolute error."""
    x0 = np.array(point, dtype=np.float64, copy=True)
    p = Parameter("x", x0)
    out = fn(p)
    if out.value.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    analytic = backward(out)["x"]
    analytic = np.zeros_like(x0) if analytic is None else np.array(analytic, dtype=np.float64)
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        vals = []
        for sgn in (1.0, -1.0):
            xp = flat.copy()
            xp[i] += sgn * step
            v = fn(const(xp.reshape(x0.shape))).item()
            if not np.isfinite(v):
                raise EvaluationError(f"non-finite value at perturbed coordinate {i}")
            vals.append(v)
        numeric.reshape(-1)[i] = (vals[0] - vals[1]) / (2 * step)
    errors = relative_error(analytic, numeric, floor)
    return GradCheckReport(errors, analytic, numeric, tolerance)

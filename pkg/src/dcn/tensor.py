"""Minimal dense-array engine with reverse-mode differentiation.

Every operation the comparator network needs lives here, on top of numpy.
Each op computes its forward value eagerly and, when gradients are being
recorded, appends a :class:`Node` to the implicit graph. Nodes carry a
global sequence number; :meth:`Tensor.backward` visits the reachable nodes
in exact reverse insertion order, so gradient summation order is fixed by
graph construction order.

Layout is row-major NHWC throughout. There is no general broadcasting:
binary ops require equal shapes, and biases are handled inside the ops
that take them.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Node",
    "ShapeError",
    "GradCheckError",
    "no_grad",
    "grad_enabled",
    "tensor",
    "conv2d",
    "max_pool2d",
    "relu",
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "square",
    "sum",
    "mean",
    "max_reduce",
    "softmax_over",
    "log_softmax",
    "cross_entropy",
    "l2_normalize",
    "weighted_sum_pool",
    "concat",
    "reshape",
    "grad_check",
]

L2_EPS = 1e-12

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class GradCheckError(ArithmeticError):
    """Raised by :func:`grad_check` when a gradient is not finite."""

    def __init__(self, message: str, input_index: int, coordinate: tuple):
        super().__init__(message)
        self.input_index = input_index
        self.coordinate = coordinate


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording graph nodes (thread-local)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence]
    seq: int


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __getitem__(self, key) -> "Tensor":
        return _index(self, key)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != output shape {self.shape}")

        # collect reachable op outputs
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t.node is not None:
                order.append(t)
                stack.extend(t.node.inputs)
        order.sort(key=lambda t: t.node.seq, reverse=True)

        grads: dict[int, np.ndarray] = {id(self): grad}
        if self.node is None and self.requires_grad:
            _accumulate_leaf(self, grad)
            return
        for t in order:
            g = grads.pop(id(t), None)
            if g is None:
                continue
            in_grads = t.node.backward(g)
            for inp, ig in zip(t.node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp.node is None:
                    _accumulate_leaf(inp, ig)
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + ig
                else:
                    grads[id(inp)] = ig


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: tuple, backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward, next(_seq))
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a, b, "add")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _make(x.data * c, "scale", (x,), lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, "square", (x,), lambda g: (2 * g * xd,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# reductions and shape ops
# --------------------------------------------------------------------------


def _norm_axes(axes, ndim: int) -> tuple:
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = tuple(range(x.ndim)) if axis is None else _norm_axes(axis, x.ndim)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axes, keepdims=keepdims), "sum", (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = tuple(range(x.ndim)) if axis is None else _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axes, keepdims), 1.0 / count)


def max_reduce(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal entry."""
    (ax,) = _norm_axes(axis, x.ndim)
    idx = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    out = np.take_along_axis(x.data, idx, axis=ax)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        if not keepdims:
            g = np.expand_dims(g, ax)
        np.put_along_axis(gx, idx, g, axis=ax)
        return (gx,)

    if not keepdims:
        out = np.squeeze(out, ax)
    return _make(out, "max_reduce", (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    (ax,) = _norm_axes(axis, tensors[0].ndim)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(t.ndim) if d != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(np.concatenate([t.data for t in tensors], axis=ax), "concat", tensors, backward)


def _index(x: Tensor, key) -> Tensor:
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, key, g)
        return (gx,)

    return _make(np.array(x.data[key]), "index", (x,), backward)


# --------------------------------------------------------------------------
# normalizations
# --------------------------------------------------------------------------


def softmax_over(x: Tensor, axes) -> Tensor:
    """Softmax jointly over ``axes``, max-subtracted for stability."""
    if isinstance(axes, (tuple, list, set, frozenset)) and len(axes) == 0:
        raise ShapeError("softmax_over needs at least one axis")
    axes = _norm_axes(tuple(axes) if not isinstance(axes, int) else axes, x.ndim)
    z = x.data - x.data.max(axis=axes, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axes, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axes, keepdims=True)),)

    return _make(s, "softmax_over", (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _norm_axes(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=ax, keepdims=True))
    s = np.exp(out)
    return _make(out, "log_softmax", (x,), lambda g: (g - s * g.sum(axis=ax, keepdims=True),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of a (B, M) logit matrix against integer labels."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B, M) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, m = logits.shape
    if labels.shape[0] != b:
        raise ShapeError(f"{labels.shape[0]} labels for {b} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise ValueError(f"label outside [0, {m})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / b),)

    return _make(np.asarray(loss, dtype=logits.dtype), "cross_entropy", (logits,), backward)


def l2_normalize(v: Tensor, axis: int = -1, eps: float = L2_EPS) -> Tensor:
    """Unit-normalize along ``axis``; rows with norm below ``eps`` pass through unchanged."""
    (ax,) = _norm_axes(axis, v.ndim)
    norm = np.sqrt((v.data * v.data).sum(axis=ax, keepdims=True))
    small = norm < eps
    safe = np.where(small, 1, norm)
    y = np.where(small, v.data, v.data / safe)

    def backward(g):
        gy = (g - y * (g * y).sum(axis=ax, keepdims=True)) / safe
        return (np.where(small, g, gy),)

    return _make(y.astype(v.dtype), "l2_normalize", (v,), backward)


# --------------------------------------------------------------------------
# dense layers
# --------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fully connected layer ``x @ w + b`` over the last axis of ``x``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} != ({w.shape[1]},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out.reshape(lead + (w.shape[1],)), "linear", inputs, backward)


def weighted_sum_pool(features: Tensor, weights: Tensor) -> Tensor:
    """Attention-weighted feature sums.

    ``features`` is (..., N, h, w, C) and ``weights`` is (..., N, h, w, K);
    the result is (..., K, C) with row k = sum over n, i, j of
    ``weights[n, i, j, k] * features[n, i, j]``.
    """
    fs, ws = features.shape, weights.shape
    if features.ndim < 4 or fs[:-1] != ws[:-1] or weights.ndim != features.ndim:
        raise ShapeError(f"weighted_sum_pool: features {fs} and weights {ws} disagree")
    lead = fs[:-4]
    cells = fs[-4] * fs[-3] * fs[-2]
    f3 = features.data.reshape((-1, cells, fs[-1]))
    a3 = weights.data.reshape((-1, cells, ws[-1]))
    out = np.matmul(a3.transpose(0, 2, 1), f3)

    def backward(g):
        g3 = g.reshape((-1, ws[-1], fs[-1]))
        gf = np.matmul(a3, g3).reshape(fs)
        ga = np.matmul(f3, g3.transpose(0, 2, 1)).reshape(ws)
        return gf, ga

    return _make(out.reshape(lead + (ws[-1], fs[-1])), "weighted_sum_pool", (features, weights), backward)


# --------------------------------------------------------------------------
# convolution and pooling (NHWC)
# --------------------------------------------------------------------------


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) of NHWC input with a (kh, kw, Cin, Cout) kernel."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input and 4-d kernel, got {x.shape}, {w.shape}")
    n, h, wd, cin = x.shape
    kh, kw, kcin, cout = w.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    if stride < 1:
        raise ShapeError("conv2d: stride must be positive")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias {b.shape} != ({cout},)")
    ho, wo = _out_extent(h, kh, stride, pad), _out_extent(wd, kw, stride, pad)

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # (n, ho, wo, cin, kh, kw) -> (n*ho*wo, kh*kw*cin)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * cin)
    w2 = w.data.reshape(kh * kw * cin, cout)
    out = cols @ w2
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, cout)
    pshape = xp.shape

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros(pshape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, pad : pad + h, pad : pad + wd, :] if pad else gxp
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, "conv2d", inputs, backward)


def max_pool2d(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects NHWC input, got {x.shape}")
    n, h, wd, c = x.shape
    ho, wo = _out_extent(h, k, stride, pad), _out_extent(wd, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)), constant_values=-np.inf) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    flat = win.reshape(n, ho, wo, c, k * k)
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    pshape = xp.shape

    def backward(g):
        gxp = np.zeros(pshape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                hit = idx == i * k + j
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += g * hit
        return (gxp[:, pad : pad + h, pad : pad + wd, :] if pad else gxp,)

    return _make(np.ascontiguousarray(out), "max_pool2d", (x,), backward)


# --------------------------------------------------------------------------
# finite-difference validation
# --------------------------------------------------------------------------


def grad_check(fn: Callable[..., Tensor], inputs: Sequence, eps: float = 1e-6, seed: int = 0) -> float:
    """Compare analytic gradients of ``fn(*inputs)`` against central differences.

    Non-scalar outputs are reduced by a fixed random projection. Returns the
    max over all input coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    leaves = [Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64), requires_grad=True) for x in inputs]
    probe = fn(*leaves)
    proj = np.random.default_rng(seed).standard_normal(probe.shape)

    def objective() -> float:
        with no_grad():
            return float((fn(*leaves).data * proj).sum())

    for leaf in leaves:
        leaf.grad = None
    out = fn(*leaves)
    out.backward(proj.astype(out.dtype))

    worst = 0.0
    for li, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        for coord in np.ndindex(leaf.shape):
            a = float(analytic[coord])
            orig = leaf.data[coord]
            leaf.data[coord] = orig + eps
            fp = objective()
            leaf.data[coord] = orig - eps
            fm = objective()
            leaf.data[coord] = orig
            num = (fp - fm) / (2 * eps)
            if not (np.isfinite(a) and np.isfinite(num)):
                raise GradCheckError(f"non-finite gradient at input {li}, coordinate {coord}", li, coord)
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst

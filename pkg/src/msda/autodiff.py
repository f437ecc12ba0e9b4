"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Graphs are built dynamically: every op returns a :class:`DiffValue` that keeps
its parents and a closure mapping the output gradient to parent gradients.
``backward()`` walks the graph once in reverse topological order and adds the
result into the ``grad`` of every leaf that requires it.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .rng import Rng

_grad_enabled = contextvars.ContextVar("msda_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation, pseudo-labelling)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


class ShapeError(ValueError):
    """Operand shapes are incompatible for ``op``."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in self.shapes)}")


class DiffValue:
    """A node in the computation graph: an array plus its accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, op: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = op

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

    def detach(self) -> "DiffValue":
        return DiffValue(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"DiffValue(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_value(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else DiffValue(x)


def parameter(data) -> DiffValue:
    return DiffValue(np.array(data, dtype=np.float64), requires_grad=True)


def _node(data, parents: Sequence[DiffValue], backward_fn, op: str) -> DiffValue:
    out = DiffValue(data, op=op)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: DiffValue, b: DiffValue) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def backward(root: DiffValue) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``."""
    if root.shape != ():
        raise ValueError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order: list[DiffValue] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grads(values: Iterable[DiffValue]) -> None:
    for v in values:
        v.grad = None


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> DiffValue:
    a, b = as_value(a), as_value(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _node(out, (a, b), bw, "div")


def scale(a, factor: float) -> DiffValue:
    a = as_value(a)
    factor = float(factor)
    return _node(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def exp(a) -> DiffValue:
    a = as_value(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> DiffValue:
    a = as_value(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a) -> DiffValue:
    a = as_value(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> DiffValue:
    """Exact (erf-based) GELU."""
    a = as_value(a)
    cdf = 0.5 * (1.0 + erf(a.data * _SQRT1_2))
    out = a.data * cdf

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return _node(out, (a,), bw, "gelu")


# --------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> DiffValue:
    a = as_value(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> DiffValue:
    a = as_value(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def take(a, idx) -> DiffValue:
    """Indexing/slicing (basic or fancy); gradients scatter-add back."""
    a = as_value(a)
    if isinstance(idx, DiffValue):
        raise TypeError("index with numpy arrays, not DiffValues")
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ShapeError(f"take[{exc}]", a.shape) from None

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(out, dtype=np.float64), (a,), bw, "take")


def concat(values: Sequence, axis: int = 0) -> DiffValue:
    values = [as_value(v) for v in values]
    try:
        out = np.concatenate([v.data for v in values], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(v.shape for v in values)) from None
    sizes = np.cumsum([v.shape[axis] for v in values])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(out, values, bw, "concat")


def pad(a, widths: Sequence[tuple[int, int]], value: float = 0.0) -> DiffValue:
    a = as_value(a)
    if len(widths) != a.ndim:
        raise ShapeError("pad", a.shape, (len(widths),))
    out = np.pad(a.data, widths, constant_values=value)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _node(out, (a,), lambda g: (g[sl],), "pad")


def where(mask, a, b) -> DiffValue:
    """Masked assignment: ``a`` where ``mask`` is true, else ``b``."""
    mask = np.asarray(mask, dtype=bool)
    a, b = as_value(a), as_value(b)
    try:
        shape = np.broadcast_shapes(mask.shape, a.shape, b.shape)
    except ValueError:
        raise ShapeError("where", mask.shape, a.shape, b.shape) from None
    out = np.where(mask, a.data, b.data)

    def bw(g):
        g = np.broadcast_to(g, shape)
        return _unbroadcast(np.where(mask, g, 0.0), a.shape), _unbroadcast(np.where(mask, 0.0, g), b.shape)

    return _node(out, (a, b), bw, "where")


# --------------------------------------------------------------------------
# reductions and normalisers


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> DiffValue:
    a = as_value(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    axes = _norm_axis(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> DiffValue:
    a = as_value(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum_(a, axis, keepdims), 1.0 / count)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> DiffValue:
    a = as_value(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.log(np.sum(np.exp(a.data - m), axis=axis, keepdims=True)) + m
    out = s if keepdims else np.squeeze(s, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(a.data - s),)

    return _node(out, (a,), bw, "logsumexp")


def softmax(a, axis: int = -1) -> DiffValue:
    a = as_value(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> DiffValue:
    a = as_value(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), bw, "log_softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> DiffValue:
    """Normalise over the last axis, then apply elementwise gain and bias."""
    x, gain, bias = as_value(x), as_value(gain), as_value(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gx_hat = g * gain.data
        gx = inv_std * (
            gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gain, g_bias

    return _node(out, (x, gain, bias), bw, "layer_norm")


def cosine_similarity(a, b, axis: int = -1) -> DiffValue:
    """Cosine similarity along ``axis``; zero-norm vectors are an error."""
    a, b = as_value(a), as_value(b)
    _check_broadcast("cosine_similarity", a, b)
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True))
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ValueError("cosine_similarity: zero-norm vector")
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    cos = dot / (na * nb)

    def bw(g):
        g = np.expand_dims(g, axis)
        ga = g * (b.data / (na * nb) - cos * a.data / (na * na))
        gb = g * (a.data / (na * nb) - cos * b.data / (nb * nb))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(np.squeeze(cos, axis=axis), (a, b), bw, "cosine_similarity")


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> DiffValue:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _node(out, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> DiffValue:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def conv1d(x, weight, bias=None) -> DiffValue:
    """'Same'-padded convolution along time.

    x: (B, T, Cin), weight: (K, Cin, Cout) with odd K, output (B, T, Cout).
    """
    x, weight = as_value(x), as_value(weight)
    if x.ndim != 3 or weight.ndim != 3 or weight.shape[1] != x.shape[2] or weight.shape[0] % 2 == 0:
        raise ShapeError("conv1d", x.shape, weight.shape)
    k = weight.shape[0]
    half = k // 2
    batch, steps, cin = x.shape
    xp = np.pad(x.data, ((0, 0), (half, half), (0, 0)))
    flat = xp.reshape(-1, cin)
    # one matmul per tap over the padded sequence, then shifted sums
    taps = [(flat @ weight.data[j]).reshape(batch, steps + 2 * half, -1) for j in range(k)]
    out = taps[0][:, 0:steps].copy()
    for j in range(1, k):
        out += taps[j][:, j : j + steps]

    def bw(g):
        gw = None
        gx = None
        g2 = g.reshape(-1, g.shape[-1])
        if weight.requires_grad:
            gw = np.stack([xp[:, j : j + steps].reshape(-1, cin).T @ g2 for j in range(k)])
        if x.requires_grad:
            gx = np.zeros((batch, steps, cin))
            gp = np.pad(g, ((0, 0), (half, half), (0, 0)))
            for j in range(k):
                # output t used input t + j - half
                gx += (gp[:, 2 * half - j : 2 * half - j + steps].reshape(-1, g.shape[-1]) @ weight.data[j].T).reshape(batch, steps, cin)
        return gx, gw

    y = _node(out, (x, weight), bw, "conv1d")
    return y if bias is None else add(y, bias)


# --------------------------------------------------------------------------
# stochastic relaxation


def gumbel_softmax(logits, temperature: float, rng: Rng, hard: bool = False, axis: int = -1) -> DiffValue:
    """Sample from the Gumbel-softmax relaxation along ``axis``.

    With ``hard=True`` the forward value is one-hot at the perturbed argmax and
    the gradient is that of the soft sample (straight-through).
    """
    logits = as_value(logits)
    if not temperature > 0:
        raise ValueError(f"gumbel_softmax: temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("gumbel_softmax: non-finite logits")
    noise = rng.gumbel(logits.shape)
    z = (logits.data + noise) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    soft = e / e.sum(axis=axis, keepdims=True)
    if hard:
        idx = np.argmax(soft, axis=axis)
        out = np.zeros_like(soft)
        np.put_along_axis(out, np.expand_dims(idx, axis), 1.0, axis=axis)
    else:
        out = soft

    def bw(g):
        return (soft * (g - (g * soft).sum(axis=axis, keepdims=True)) / temperature,)

    return _node(out, (logits,), bw, "gumbel_softmax_hard" if hard else "gumbel_softmax")


# public hook for fused ops defined elsewhere (e.g. the CTC recursion)
custom_op = _node

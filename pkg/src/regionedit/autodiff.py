"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation the editing model needs is a plain function here. Shapes
must agree exactly; the only implicit broadcast is between a scalar
(shape ``()``) tensor and a tensor of any shape. Ops that act "per row"
work on the last axis and accept any number of leading batch axes.
"""

from __future__ import annotations

import contextlib
import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    GraphError,
    NonFiniteError,
)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An n-dimensional float64 array that may take part in a graph.

    Leaf tensors created with ``requires_grad=True`` accumulate
    ``d loss / d leaf`` into :attr:`grad` during :meth:`backward`.
    """

    __slots__ = ("_backward", "_parents", "_released", "data", "grad", "op", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward = None
        self._released = False
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{op} produced NaN or Inf")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._released = False
        out.op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- conveniences -------------------------------------------------
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

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a Python scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# backward engine
# ---------------------------------------------------------------------------


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its parents."""
    order: list[Tensor] = []
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
        if node._released:
            raise GraphError("graph already consumed by a previous backward pass; rerun the forward")
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into every ``requires_grad`` leaf.

    The graph is released afterwards; calling this twice on the same
    graph raises :class:`GraphError`.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    if loss._backward is None:
        if loss._released:
            raise GraphError("graph already consumed by a previous backward pass")
        loss.grad = loss.grad + np.ones_like(loss.data)
        return
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node.requires_grad and g is not None:
                node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        if g is not None:
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        node._backward = None
        node._parents = ()
        node._released = True


# ---------------------------------------------------------------------------
# elementwise kernels
# ---------------------------------------------------------------------------


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")

    def bw(g):
        return (_reduce_to(g, a.shape) if a.requires_grad else None,
                _reduce_to(g, b.shape) if b.requires_grad else None)

    return Tensor._from_op(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")

    def bw(g):
        return (_reduce_to(g, a.shape) if a.requires_grad else None,
                -_reduce_to(g, b.shape) if b.requires_grad else None)

    return Tensor._from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    _check_same(a, b, "mul")

    def bw(g):
        return (_reduce_to(g * b.data, a.shape) if a.requires_grad else None,
                _reduce_to(g * a.data, b.shape) if b.requires_grad else None)

    return Tensor._from_op(a.data * b.data, (a, b), bw, "mul")


elementwise_mul = mul


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return Tensor._from_op(a.data + float(c), (a,), lambda g: (g,), "add_scalar")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ContractError("sqrt needs strictly positive input")
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation (its derivative is exact for this form)."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return Tensor._from_op(out, (a,), bw, "gelu")


# ---------------------------------------------------------------------------
# shape kernels
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError("transpose needs at least 2 axes")
    return Tensor._from_op(np.swapaxes(a.data, -1, -2), (a,),
                           lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(a.data, axes), (a,),
                           lambda g: (np.transpose(g, inverse),), "permute")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def slice_(a: Tensor, idx) -> Tensor:
    """``a[idx]``; fancy indices scatter-add on the way back."""
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(np.array(out, dtype=np.float64), (a,), bw, "slice")


def take_rows(a: Tensor, index: Sequence[int]) -> Tensor:
    """Rows of ``a`` along axis 0."""
    return slice_(a, np.asarray(index, dtype=np.intp))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ContractError("concat of nothing")
    nd = tensors[0].ndim
    ax = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        parts = []
        for i, t in enumerate(tensors):
            if t.requires_grad:
                sl = [slice(None)] * nd
                sl[ax] = slice(bounds[i], bounds[i + 1])
                parts.append(g[tuple(sl)])
            else:
                parts.append(None)
        return tuple(parts)

    return Tensor._from_op(out, tuple(tensors), bw, "concat")


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate ``(h, w, c_i)`` tensors along the channel axis."""
    return concat(list(tensors), axis=-1)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def upsample_nearest(a: Tensor, factor: int) -> Tensor:
    """Repeat each cell of the last two axes into a ``factor x factor`` block."""
    f = int(factor)
    out = np.repeat(np.repeat(a.data, f, axis=-2), f, axis=-1)

    def bw(g):
        s = g.shape[:-2] + (a.shape[-2], f, a.shape[-1], f)
        return (g.reshape(s).sum(axis=(-3, -1)),)

    return Tensor._from_op(out, (a,), bw, "upsample_nearest")


def expand_channels(a: Tensor, channels: int) -> Tensor:
    """``(..., h, w) -> (..., h, w, channels)`` by repetition."""
    out = np.repeat(a.data[..., None], int(channels), axis=-1)
    return Tensor._from_op(out, (a,), lambda g: (g.sum(axis=-1),), "expand_channels")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_(a: Tensor, axis=None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return Tensor._from_op(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def mean_pool_rows(a: Tensor) -> Tensor:
    """Average over the token axis: ``(..., K, d) -> (..., d)``."""
    if a.ndim < 2 or a.shape[-2] < 1:
        raise DimensionError("mean_pool_rows needs at least one row")
    return mean(a, axis=-2)


def mse(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mse")
    d = sub(a, b)
    return mean(mul(d, d))


# ---------------------------------------------------------------------------
# linear algebra and row kernels
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., p, q) @ (q, r)`` or batched ``(..., p, q) @ (..., q, r)``."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs matrices")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions {a.shape} @ {b.shape} disagree")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch shapes {a.shape[:-2]} and {b.shape[:-2]} differ")
    if b.ndim > 2 and a.ndim != b.ndim:
        raise DimensionError("matmul: batched operands need equal rank")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return Tensor._from_op(out, (a, b), bw, "matmul")


def affine_rows(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    """``x * gain + bias`` with ``gain``/``bias`` of shape ``(d,)`` applied to every row."""
    d = x.shape[-1]
    for p in (gain, bias):
        if p is not None and p.shape != (d,):
            raise DimensionError(f"affine_rows: parameter shape {p.shape} vs rows of width {d}")
    out = x.data
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    if out is x.data:
        out = out.copy()
    parents = tuple(p for p in (x, gain, bias) if p is not None)

    def bw(g):
        grads = [g * gain.data if gain is not None else g] if x.requires_grad else [None]
        flat = g.reshape(-1, d)
        if gain is not None:
            grads.append((flat * x.data.reshape(-1, d)).sum(axis=0) if gain.requires_grad else None)
        if bias is not None:
            grads.append(flat.sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)

    return Tensor._from_op(out, parents, bw, "affine_rows")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return affine_rows(y, None, bias) if bias is not None else y


def softmax_rows(x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, stabilized by the row max.

    ``key_mask`` (boolean, broadcastable to ``x``) marks the columns that
    take part; masked columns get probability exactly 0.
    """
    if x.size == 0:
        return Tensor._from_op(x.data.copy(), (x,), lambda g: (g,), "softmax_rows")
    z = x.data
    if key_mask is not None:
        km = np.broadcast_to(np.asarray(key_mask, dtype=bool), z.shape)
        if not km.any(axis=-1).all():
            raise ContractError("softmax_rows: a row has every key masked")
        z = np.where(km, z, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(out, (x,), bw, "softmax_rows")


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return Tensor._from_op(out, (x,), bw, "log_softmax_rows")


def layernorm_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize each row to zero mean and unit variance (no affine part)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return Tensor._from_op(out, (x,), bw, "layernorm_rows")


def _row_norms(v: np.ndarray, op: str) -> np.ndarray:
    n = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    if np.any(n == 0.0):
        raise DegenerateInputError(f"{op}: zero-norm input")
    return n


def l2_normalize_rows(x: Tensor) -> Tensor:
    n = _row_norms(x.data, "l2_normalize_rows")
    out = x.data / n

    def bw(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / n,)

    return Tensor._from_op(out, (x,), bw, "l2_normalize_rows")


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity over the last axis: ``(..., d), (..., d) -> (...)``."""
    if a.shape != b.shape:
        raise DimensionError(f"cosine: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 0 or a.shape[-1] < 1:
        raise DimensionError("cosine needs vectors of length >= 1")
    na = _row_norms(a.data, "cosine")
    nb = _row_norms(b.data, "cosine")
    ua, ub = a.data / na, b.data / nb
    c = (ua * ub).sum(axis=-1, keepdims=True)
    out = np.clip(c[..., 0], -1.0, 1.0)

    def bw(g):
        g = np.asarray(g)[..., None]
        ga = g * (ub - c * ua) / na if a.requires_grad else None
        gb = g * (ua - c * ub) / nb if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), bw, "cosine")


# ---------------------------------------------------------------------------
# image kernels
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Same-padded 2-D convolution on ``(B, H, W, C_in)`` with ``(k, k, C_in, C_out)`` weights."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects (B,H,W,C) input and (k,k,Cin,Cout) weight")
    k, k2, cin, cout = weight.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError("conv2d kernel must be square and odd")
    if x.shape[-1] != cin:
        raise DimensionError(f"conv2d: input channels {x.shape[-1]} vs kernel {cin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError("conv2d: bias shape")
    dil = int(dilation)
    pad = dil * (k // 2)
    B, H, W, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    taps = [(ky, kx, ky * dil, kx * dil) for ky in range(k) for kx in range(k)]
    # one matmul per kernel tap over a shifted view; cheaper than an im2col copy
    out = np.zeros((B, H, W, cout))
    for ky, kx, oy, ox in taps:
        out += xp[:, oy:oy + H, ox:ox + W, :] @ weight.data[ky, kx]
    if bias is not None:
        out += bias.data
    parents = (x, weight) + ((bias,) if bias is not None else ())
    padded_shape = xp.shape
    # frozen kernels need no copy of the input on the way back
    if not (weight.requires_grad and _grad_enabled):
        xp = None

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros(padded_shape)
            for ky, kx, oy, ox in taps:
                gxp[:, oy:oy + H, ox:ox + W, :] += g @ weight.data[ky, kx].T
            gx = gxp[:, pad:pad + H, pad:pad + W, :]
        if weight.requires_grad:
            gflat = g.reshape(-1, cout)
            gw = np.empty(weight.shape)
            for ky, kx, oy, ox in taps:
                gw[ky, kx] = xp[:, oy:oy + H, ox:ox + W, :].reshape(-1, cin).T @ gflat
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 1, 2)) if bias.requires_grad else None,)
        return grads

    return Tensor._from_op(out, parents, bw, "conv2d")


def modulate(x: Tensor, scale_: Tensor, shift: Tensor) -> Tensor:
    """Feature-wise ``x * (1 + scale) + shift`` for ``x`` of shape ``(B, H, W, C)``
    and per-sample ``scale``/``shift`` of shape ``(B, C)``."""
    if x.ndim != 4 or scale_.shape != (x.shape[0], x.shape[3]) or shift.shape != scale_.shape:
        raise DimensionError("modulate: expected (B,H,W,C) with (B,C) scale and shift")
    s = 1.0 + scale_.data[:, None, None, :]
    out = x.data * s + shift.data[:, None, None, :]

    def bw(g):
        return (g * s if x.requires_grad else None,
                (g * x.data).sum(axis=(1, 2)) if scale_.requires_grad else None,
                g.sum(axis=(1, 2)) if shift.requires_grad else None)

    return Tensor._from_op(out, (x, scale_, shift), bw, "modulate")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam moments and hyper-parameters for an ordered parameter list."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> OptimizerState:
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **kw)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState):
    """One bias-corrected Adam update, in place. Returns ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("adam_step: params, grads and state disagree in length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise DimensionError(f"adam_step: shape {p.shape} vs grad {np.shape(g)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.data = np.asarray(p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps))  # keeps 0-d params arrays
    return params


class Adam:
    """Thin stateful wrapper over :func:`adam_step` reading ``p.grad``."""

    def __init__(self, params: Iterable[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = OptimizerState.for_params(self.params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, index, h: float = 1e-5) -> float:
    """Central difference of scalar ``fn()`` w.r.t. one entry of ``param``."""
    old = param.data[index]
    with no_grad():
        param.data[index] = old + h
        fp = fn().item()
        param.data[index] = old - h
        fm = fn().item()
    param.data[index] = old
    return (fp - fm) / (2.0 * h)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
              max_entries: int | None = None, rng: np.random.Generator | None = None,
              floor: float = 1e-6) -> float:
    """Max relative error between backward and central differences.

    ``max_entries`` samples that many entries across all ``params``.
    """
    for p in params:
        if not p.requires_grad:
            raise ContractError("gradcheck parameters must require grad")
        p.zero_grad()
        p.data = np.array(p.data, dtype=np.float64)
    backward(fn())
    analytic = [p.grad.copy() for p in params]
    entries = [(i, idx) for i, p in enumerate(params) for idx in np.ndindex(p.shape)]
    if max_entries is not None and len(entries) > max_entries:
        rng = rng if rng is not None else np.random.default_rng(0)
        pick = rng.choice(len(entries), size=max_entries, replace=False)
        entries = [entries[j] for j in pick]
    worst = 0.0
    for i, idx in entries:
        num = numerical_gradient(fn, params[i], idx, h)
        worst = max(worst, relative_error(float(analytic[i][idx]), num, floor))
    return worst

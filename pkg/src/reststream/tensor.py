"""Minimal dense tensor with reverse-mode automatic differentiation.

Storage is float32, row-major, backed by numpy arrays. Reductions (matmul,
sum, mse, softmax normalisation) accumulate in float64 and round back to
float32 so that oracle comparisons can use tight tolerances.

Only the operations the diffusion stack needs are provided. Elementwise
binary ops broadcast numpy-style and un-broadcast gradients on the way back.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

F32 = np.float32
F64 = np.float64

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)
_flop_counter: contextvars.ContextVar["FlopCounter | None"] = contextvars.ContextVar(
    "flop_counter", default=None
)


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


class BackwardError(RuntimeError):
    """Raised when backward() is called on something that is not a scalar graph output."""


class FlopCounter:
    """Counts multiply-add FLOPs of matmuls executed inside a ``counting()`` block.

    A matmul of ``[..., m, k] @ [..., k, n]`` with batch size ``B`` counts as
    ``2 * B * m * k * n`` FLOPs. Nothing else is counted.
    """

    def __init__(self) -> None:
        self.flops = 0

    def add(self, n: int) -> None:
        self.flops += int(n)


@contextlib.contextmanager
def counting(counter: FlopCounter | None = None):
    counter = counter if counter is not None else FlopCounter()
    token = _flop_counter.set(counter)
    try:
        yield counter
    finally:
        _flop_counter.reset(token)


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    """A float32 array that optionally records the ops applied to it.

    ``parents`` and ``backward_fn`` form the compute-graph node; leaves have no
    parents. Gradients accumulate into ``grad`` across backward calls until
    ``zero_grad()`` is called.
    """

    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, _op: str = "leaf"):
        arr = np.asarray(data, dtype=F32)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = _parents
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = _op

    # -- basic properties -------------------------------------------------
    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self, name: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            bad = int(np.size(self.data) - np.count_nonzero(np.isfinite(self.data)))
            raise FloatingPointError(f"{name}: {bad} non-finite value(s) in shape {self.shape}")
        return self

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}, op={self.op}{rg})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *dims):
        if len(dims) == 1 and isinstance(dims[0], (tuple, list)):
            dims = tuple(dims[0])
        return reshape(self, dims)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def _raise_item(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single-element tensor, got dims {t.dims}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    track = _grad_enabled.get() and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0, dtype=F64)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True, dtype=F64)
    return grad.astype(F32)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.dims} and {b.dims}") from None


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c32 = F32(c)
    return _make(a.data * c32, (a,), lambda g: (g * c32,), "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def silu(a: Tensor) -> Tensor:
    x = a.data.astype(F64)
    sig = 1.0 / (1.0 + np.exp(-x))
    out = (x * sig).astype(F32)
    dx = (sig * (1.0 + x * (1.0 - sig))).astype(F32)
    return _make(out, (a,), lambda g: (g * dx,), "silu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data.astype(F64)
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = (0.5 * x * (1.0 + th)).astype(F32)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    dx = (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner).astype(F32)
    return _make(out, (a,), lambda g: (g * dx,), "gelu")


# -- shape ops -------------------------------------------------------------

def reshape(a: Tensor, dims: Iterable[int]) -> Tensor:
    dims = tuple(int(d) for d in dims)
    try:
        out = a.data.reshape(dims)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.dims} as {list(dims)}") from None
    shape = a.shape
    return _make(out, (a,), lambda g: (g.reshape(shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None or len(axes) == 0:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(
                f"concat along axis {axis}: shapes {[x.dims for x in tensors]} differ off-axis"
            )
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * nd
            sl[ax] = slice(int(lo), int(hi))
            out.append(g[tuple(sl)])
        return out

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


def take(a: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing; copies, gradient scatters back."""
    out = np.array(a.data[idx], dtype=F32, copy=True)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=F32)
        full[idx] += g
        return (full,)

    return _make(out, (a,), bw, "take")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        dims = list(t.shape)
        ax = axis % (len(dims) + 1)
        dims.insert(ax, 1)
        expanded.append(reshape(t, dims))
    return concat(expanded, axis=axis)


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary rotation over the last axis split in halves: x*cos + [-x2, x1]*sin."""
    half = x.shape[-1] // 2
    xd = x.data
    rot = np.concatenate([-xd[..., half:], xd[..., :half]], axis=-1)
    out = xd * cos + rot * sin

    def bw(g):
        gs = g * sin
        return (g * cos + np.concatenate([gs[..., half:], -gs[..., :half]], axis=-1),)

    return _make(out.astype(F32), (x,), bw, "rotate_pairs")


# -- reductions ------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=F64).astype(F32)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(F32),)

    return _make(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[x] for x in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.dims} @ {b.dims}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.dims} and {b.dims} do not broadcast") from None
    ad, bd = a.data, b.data
    out = np.matmul(ad.astype(F64), bd.astype(F64)).astype(F32)
    counter = _flop_counter.get()
    if counter is not None:
        m, k = ad.shape[-2:]
        n = bd.shape[-1]
        counter.add(2 * int(np.prod(batch, dtype=np.int64)) * m * k * n)

    def bw(g):
        g64 = g.astype(F64)
        ga = np.matmul(g64, np.swapaxes(bd, -1, -2).astype(F64))
        gb = np.matmul(np.swapaxes(ad, -1, -2).astype(F64), g64)
        return _unbroadcast(ga.astype(F32), ad.shape), _unbroadcast(gb.astype(F32), bd.shape)

    return _make(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with x of shape [..., in] and w of shape [in, out]."""
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = add(y, b)
    return reshape(y, lead + (w.shape[-1],))


# -- normalisation and attention primitives --------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = axis % max(x.ndim, 1)
    z = x.data.astype(F64)
    z = z - z.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y64 = e / e.sum(axis=ax, keepdims=True)
    y = y64.astype(F32)

    def bw(g):
        g64 = g.astype(F64)
        dot = (g64 * y64).sum(axis=ax, keepdims=True)
        return ((y64 * (g64 - dot)).astype(F32),)

    return _make(y, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply optional gain/bias."""
    x64 = x.data.astype(F64)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat64 = xc * inv
    n = x.shape[-1]

    def bw(g):
        g64 = g.astype(F64)
        gm = g64.mean(axis=-1, keepdims=True)
        gx = (g64 * xhat64).mean(axis=-1, keepdims=True)
        return (((g64 - gm - xhat64 * gx) * inv).astype(F32),)

    del n
    out = _make(xhat64.astype(F32), (x,), bw, "layer_norm")
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


# -- losses ----------------------------------------------------------------

def mse(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {a.dims} vs {b.dims}")
    diff = a.data.astype(F64) - b.data.astype(F64)
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=F32)

    def bw(g):
        gd = (2.0 / n) * float(np.asarray(g).reshape(-1)[0]) * diff
        return gd.astype(F32), (-gd).astype(F32)

    return _make(out, (a, b), bw, "mse")


def cosine_sim(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine similarity of two same-shape tensors viewed as flat vectors.

    A zero vector on either side yields 0 (and a zero gradient).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_sim: shape mismatch {a.dims} vs {b.dims}")
    x = a.data.astype(F64).reshape(-1)
    y = b.data.astype(F64).reshape(-1)
    nx, ny = np.sqrt(x @ x), np.sqrt(y @ y)
    if nx < eps or ny < eps:
        zero_a, zero_b = np.zeros(a.shape, F32), np.zeros(b.shape, F32)
        return _make(np.asarray(0.0, F32), (a, b), lambda g: (zero_a, zero_b), "cosine_sim")
    c = (x @ y) / (nx * ny)

    def bw(g):
        g = float(np.asarray(g).reshape(-1)[0])
        ga = g * (y / (nx * ny) - c * x / (nx * nx))
        gb = g * (x / (nx * ny) - c * y / (ny * ny))
        return ga.reshape(a.shape).astype(F32), gb.reshape(b.shape).astype(F32)

    return _make(np.asarray(c, F32), (a, b), bw, "cosine_sim")


def cosine_matrix(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise cosine similarities: out[i, j] = cos(a[i], b[j]) for 2-D a, b.

    Zero rows produce zero similarities.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_matrix: need [n, d] and [m, d], got {a.dims}, {b.dims}")
    x = a.data.astype(F64)
    y = b.data.astype(F64)
    nx = np.sqrt((x * x).sum(axis=1))
    ny = np.sqrt((y * y).sum(axis=1))
    ix = np.where(nx > eps, 1.0 / np.maximum(nx, eps), 0.0)
    iy = np.where(ny > eps, 1.0 / np.maximum(ny, eps), 0.0)
    xh = x * ix[:, None]
    yh = y * iy[:, None]
    c = xh @ yh.T

    def bw(g):
        g64 = g.astype(F64)
        # d c_ij / d x_i = (yh_j - c_ij xh_i) / |x_i|
        gx = (g64 @ yh - (g64 * c).sum(axis=1, keepdims=True) * xh) * ix[:, None]
        gy = (g64.T @ xh - (g64 * c).sum(axis=0)[:, None] * yh) * iy[:, None]
        return gx.astype(F32), gy.astype(F32)

    return _make(c.astype(F32), (a, b), bw, "cosine_matrix")


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    ax = axis % x.ndim
    z = x.data.astype(F64)
    m = z.max(axis=ax, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=ax, keepdims=True)
    out = (np.log(s) + m).squeeze(ax)
    p = e / s

    def bw(g):
        return ((np.expand_dims(g.astype(F64), ax) * p).astype(F32),)

    return _make(out.astype(F32), (x,), bw, "logsumexp")


# -- backward --------------------------------------------------------------

def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Propagate d(loss)/d(node) to every leaf with ``requires_grad``.

    Leaf gradients accumulate across calls.
    """
    if grad is None:
        if loss.data.size != 1:
            raise BackwardError(f"backward() on non-scalar tensor with dims {loss.dims}")
        grad = np.ones(loss.shape, dtype=F32)
    if not loss.requires_grad:
        raise BackwardError("backward() on a tensor that is not part of a graph")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=F32)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

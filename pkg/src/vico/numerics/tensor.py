"""Deterministic tensor core with reverse-mode automatic differentiation.

Every kernel is a plain numpy computation plus a closure that maps the
output gradient back onto the inputs. Graphs are built define-by-run:
a produced tensor remembers its parents, and ``backward`` replays the
recorded operations in reverse topological order (see :class:`Tape`).

Broadcasting is deliberately restricted: two operands must either have
identical shapes or one must equal the trailing suffix of the other
(which covers bias rows and per-column masks). Anything else needs an
explicit :func:`expand`. Scalars are always allowed and adopt the other
operand's dtype so float32 graphs stay float32.

All kernels accumulate sequentially in a single thread, so results are
bitwise reproducible for fixed inputs within a process.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "TapeNode",
    "tensor",
    "const",
    "zeros",
    "ones",
    "no_grad",
    "grad_enabled",
    "set_default_dtype",
    "get_default_dtype",
    "deterministic_mode",
    "thread_limit",
    "backward",
    "trace",
    "matmul",
    "softmax_last",
    "conv2d",
    "group_norm",
    "layer_norm",
    "silu",
    "exp",
    "sqrt",
    "concat",
    "expand",
    "select_last",
    "select_last_per_row",
    "max_last",
    "add_spatial",
    "upsample_nearest2x",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a kernel."""


_DTYPES = {"f32": np.float32, "f64": np.float64}
_default_dtype = np.float32
_grad_enabled = True


def set_default_dtype(mode):
    """Select the precision for newly created leaf tensors: "f32" or "f64"."""
    global _default_dtype
    if isinstance(mode, str):
        if mode not in _DTYPES:
            raise ValueError(f"unknown precision mode {mode!r}; expected 'f32' or 'f64'")
        _default_dtype = _DTYPES[mode]
    elif mode in (np.float32, np.float64):
        _default_dtype = mode
    else:
        raise ValueError(f"unsupported dtype {mode!r}")


def get_default_dtype():
    return _default_dtype


def thread_limit() -> int:
    """Kernel thread cap from VICO_THREADS; 0 means unconstrained."""
    raw = os.environ.get("VICO_THREADS", "").strip()
    if not raw:
        return 0
    try:
        return max(0, int(raw))
    except ValueError:
        return 0


def deterministic_mode() -> bool:
    """All kernels here run sequentially, so execution is always
    order-deterministic; VICO_THREADS=1 additionally pins the BLAS pool."""
    return True


def grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad():
    """Disable graph recording inside the block (used for sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float array, optionally tracked for autodiff.

    Leaves created with ``requires_grad=True`` carry a ``grad`` buffer that
    ``backward`` accumulates into; call :meth:`zero_grad` between steps.
    Interior results keep references to their parents so the graph stays
    alive exactly as long as someone holds the output.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad and not _parents else None
        self.node_id = None
        self._parents = _parents
        self._backward = _backward

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    @property
    def tracked(self) -> bool:
        """True when this tensor participates in some gradient path."""
        return self.requires_grad or bool(self._parents)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap_scalar(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap_scalar(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)


def _scalar_error(t):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Create a leaf tensor in the default (or given) precision."""
    arr = np.asarray(data, dtype=dtype or _default_dtype)
    return Tensor(arr, requires_grad=requires_grad)


def const(data) -> Tensor:
    """Wrap an existing array as an untracked constant, keeping its dtype."""
    return Tensor(np.asarray(data))


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _default_dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _default_dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Tape and backward pass
# ---------------------------------------------------------------------------


@dataclass
class TapeNode:
    """One recorded primitive: output, inputs, and the gradient map."""

    output: Tensor
    inputs: tuple
    backward_fn: Callable


class Tape:
    """Primitive operations of a graph in topological order.

    Node ids are positions in ``nodes``; every input of a node was produced
    (or is a leaf numbered) strictly before the node itself.
    """

    def __init__(self, nodes: list[TapeNode]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def verify_topological(self) -> bool:
        seen = set()
        for node in self.nodes:
            for parent in node.inputs:
                if parent._parents and id(parent) not in seen:
                    return False
            seen.add(id(node.output))
        return True


def trace(root: Tensor) -> Tape:
    """Collect the subgraph below ``root`` as a topologically ordered tape."""
    nodes: list[TapeNode] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            t.node_id = len(nodes)
            nodes.append(TapeNode(t, t._parents, t._backward))
            continue
        if id(t) in visited or not t._parents:
            continue
        visited.add(id(t))
        stack.append((t, True))
        for parent in t._parents:
            if parent._parents and id(parent) not in visited:
                stack.append((parent, False))
    return Tape(nodes)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into every tracked leaf's ``grad``.

    The loss must be a scalar. Gradients of leaves the graph never touched
    are left at their zero initialization, and repeated calls accumulate.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss._parents:
        if loss.requires_grad:
            loss.grad += np.ones_like(loss.data)
        return Tape([])
    tape = trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.inputs, parent_grads):
            if pg is None or not parent.tracked:
                continue
            if parent._parents:
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
            elif parent.requires_grad:
                parent.grad += pg.astype(parent.data.dtype, copy=False)
    return tape


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _grad_enabled and any(p.tracked for p in parents):
        return Tensor(data, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data)


# ---------------------------------------------------------------------------
# Shape and dtype policing
# ---------------------------------------------------------------------------


def _check_dtypes(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def _check_suffix_broadcast(a_shape: tuple, b_shape: tuple, op: str) -> None:
    """Equal shapes, scalar, or one shape equal to the other's trailing suffix."""
    if a_shape == b_shape or a_shape == () or b_shape == ():
        return
    small, big = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if big[len(big) - len(small):] == small:
        return
    raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} are not suffix-broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after suffix broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g.reshape(shape)


def _wrap_scalar(value, like: Tensor) -> Tensor:
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _coerce(other, like: Tensor) -> Tensor:
    if isinstance(other, Tensor):
        return other
    if isinstance(other, (int, float, np.floating, np.integer)):
        return _wrap_scalar(other, like)
    raise TypeError(f"cannot combine Tensor with {type(other).__name__}")


# ---------------------------------------------------------------------------
# Elementwise kernels
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_dtypes(a, b, "add")
    _check_suffix_broadcast(a.shape, b.shape, "add")
    out = a.data + b.data
    need_a, need_b = a.tracked, b.tracked

    def bwd(g):
        return (
            _unbroadcast(g, a.shape) if need_a else None,
            _unbroadcast(g, b.shape) if need_b else None,
        )

    return _result(out, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_dtypes(a, b, "sub")
    _check_suffix_broadcast(a.shape, b.shape, "sub")
    out = a.data - b.data
    need_a, need_b = a.tracked, b.tracked

    def bwd(g):
        return (
            _unbroadcast(g, a.shape) if need_a else None,
            _unbroadcast(-g, b.shape) if need_b else None,
        )

    return _result(out, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_dtypes(a, b, "mul")
    _check_suffix_broadcast(a.shape, b.shape, "mul")
    out = a.data * b.data
    a_data, b_data = a.data, b.data
    need_a, need_b = a.tracked, b.tracked

    def bwd(g):
        return (
            _unbroadcast(g * b_data, a.shape) if need_a else None,
            _unbroadcast(g * a_data, b.shape) if need_b else None,
        )

    return _result(out, (a, b), bwd)


def div(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_dtypes(a, b, "div")
    _check_suffix_broadcast(a.shape, b.shape, "div")
    out = a.data / b.data
    a_data, b_data = a.data, b.data
    need_a, need_b = a.tracked, b.tracked

    def bwd(g):
        ga = _unbroadcast(g / b_data, a.shape) if need_a else None
        gb = _unbroadcast(-g * a_data / (b_data * b_data), b.shape) if need_b else None
        return ga, gb

    return _result(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _result(out, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bwd(g):
        return (g / (2.0 * out),)

    return _result(out, (a,), bwd)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), the backbone nonlinearity."""
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def bwd(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return _result(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Structural kernels
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _result(out, (a,), bwd)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = np.argsort(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))

    def bwd(g):
        return (g.transpose(tuple(inv)),)

    return _result(out, (a,), bwd)


def concat(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: no tensors given")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tuple(parts), bwd)


def expand(a: Tensor, shape: tuple) -> Tensor:
    """Explicit numpy-style broadcast to ``shape`` (gradient sums back)."""
    out = np.broadcast_to(a.data, shape)

    def bwd(g):
        extra = len(shape) - a.data.ndim
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        kept = tuple(i for i, n in enumerate(a.shape) if n == 1 and g.shape[i] != 1)
        if kept:
            g = g.sum(axis=kept, keepdims=True)
        return (g.reshape(a.shape),)

    return _result(np.ascontiguousarray(out), (a,), bwd)


def select_last(a: Tensor, index: int) -> Tensor:
    """a[..., index]; gradient scatters back into the selected column."""
    n = a.shape[-1]
    if not -n <= index < n:
        raise ShapeError(f"select_last: index {index} out of range for extent {n}")
    out = np.ascontiguousarray(a.data[..., index])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[..., index] = g
        return (full,)

    return _result(out, (a,), bwd)


def select_last_per_row(a: Tensor, indices) -> Tensor:
    """Per-leading-row gather along the last axis.

    ``a`` has shape [B, ..., N] and ``indices`` is one index per batch row;
    the output drops the last axis.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"select_last_per_row: need {a.shape[0]} indices, got {idx.shape}")
    sel = idx.reshape((a.shape[0],) + (1,) * (a.data.ndim - 1))
    out = np.take_along_axis(a.data, sel, axis=-1)[..., 0]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, sel, g[..., None], axis=-1)
        return (full,)

    return _result(np.ascontiguousarray(out), (a,), bwd)


def _restore_axes(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        return (np.ascontiguousarray(_restore_axes(g, a.shape, axis, keepdims)),)

    return _result(np.asarray(out), (a,), bwd)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax % a.data.ndim] for ax in ((axis,) if isinstance(axis, int) else axis)]
    )
    scale = 1.0 / float(count)

    def bwd(g):
        return (np.ascontiguousarray(_restore_axes(g * scale, a.shape, axis, keepdims)),)

    return _result(np.asarray(out), (a,), bwd)


def max_last(a: Tensor, keepdims: bool = True) -> Tensor:
    """Max over the last axis; gradient goes to the first argmax entry."""
    idx = np.argmax(a.data, axis=-1)
    sel = idx[..., None]
    out = np.take_along_axis(a.data, sel, axis=-1)
    if not keepdims:
        out = out[..., 0]

    def bwd(g):
        full = np.zeros_like(a.data)
        gk = g if keepdims else g[..., None]
        np.put_along_axis(full, sel, gk, axis=-1)
        return (full,)

    return _result(np.ascontiguousarray(out), (a,), bwd)


# ---------------------------------------------------------------------------
# Linear algebra and attention kernels
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading batch dims broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents disagree for shapes {a.shape} x {b.shape}")
    _check_dtypes(a, b, "matmul")
    out = np.matmul(a.data, b.data)
    a_data, b_data = a.data, b.data
    need_a, need_b = a.tracked, b.tracked

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b_data, -1, -2)), a.shape) if need_a else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a_data, -1, -2), g), b.shape) if need_b else None
        return ga, gb

    return _result(out, (a, b), bwd)


def softmax_last(a: Tensor) -> Tensor:
    """Numerically stabilized softmax over the last axis."""
    if a.shape[-1] < 1:
        raise ShapeError("softmax_last: empty trailing axis")
    out = a.data - a.data.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)

    def bwd(g):
        gx = g * out
        dot = gx.sum(axis=-1, keepdims=True)
        np.subtract(g, dot, out=gx)
        gx *= out
        return (gx,)

    return _result(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Convolution and normalization kernels
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """[B,C,Hp,Wp] -> [B, C*kh*kw, ho*wo] patches."""
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [B,C,ho,wo,kh,kw]
    cols = windows.transpose(0, 1, 4, 5, 2, 3)  # [B,C,kh,kw,ho,wo]
    b, c = xp.shape[0], xp.shape[1]
    return np.ascontiguousarray(cols).reshape(b, c * kh * kw, ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of [B,C,H,W] with [O,C,kh,kw] kernels."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input and kernel, got {x.shape} and {w.shape}")
    bsz, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d: channel mismatch between input {x.shape} and kernel {w.shape}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} does not fit padded input {x.shape} (pad={pad})")
    if (h + 2 * pad - kh) % stride or (wd + 2 * pad - kw) % stride:
        raise ShapeError(
            f"conv2d: non-integral output extent for input {x.shape}, kernel {w.shape}, "
            f"stride={stride}, pad={pad}"
        )
    _check_dtypes(x, w, "conv2d")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wm = w.data.reshape(o, c * kh * kw)
    out = np.matmul(wm, cols).reshape(bsz, o, ho, wo)
    if b is not None:
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {o} output channels")
        out = out + b.data[None, :, None, None]

    need_x, need_w = x.tracked, w.tracked

    def bwd(g):
        gm = g.reshape(bsz, o, ho * wo)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if need_w else None
        gx = None
        if need_x:
            gcols = np.matmul(wm.T, gm).reshape(bsz, c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3)) if b.tracked else None

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, bwd)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-group normalization with a per-channel affine."""
    if x.data.ndim != 4:
        raise ShapeError(f"group_norm: need [B,C,H,W], got {x.shape}")
    bsz, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    grouped = x.data.reshape(bsz, groups, -1)
    mu = grouped.mean(axis=2, keepdims=True)
    var = grouped.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = ((grouped - mu) * inv).reshape(x.shape)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    m = grouped.shape[2]
    need_x, need_g, need_b = x.tracked, gamma.tracked, beta.tracked

    def bwd(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if need_g else None
        gbeta = g.sum(axis=(0, 2, 3)) if need_b else None
        gx = None
        if need_x:
            dxhat = (g * gamma.data[None, :, None, None]).reshape(bsz, groups, m)
            xh = xhat.reshape(bsz, groups, m)
            mean_d = dxhat.mean(axis=2, keepdims=True)
            mean_dx = (dxhat * xh).mean(axis=2, keepdims=True)
            gx = (inv * (dxhat - mean_d - xh * mean_dx)).reshape(x.shape)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the trailing feature axis with affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data
    need_x, need_g, need_b = x.tracked, gamma.tracked, beta.tracked

    def bwd(g):
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0) if need_g else None
        gbeta = g.reshape(-1, d).sum(axis=0) if need_b else None
        gx = None
        if need_x:
            dxhat = g * gamma.data
            mean_d = dxhat.mean(axis=-1, keepdims=True)
            mean_dx = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (dxhat - mean_d - xhat * mean_dx)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), bwd)


def add_spatial(x: Tensor, v: Tensor) -> Tensor:
    """x[B,C,H,W] + v[B,C] broadcast over the spatial plane."""
    if x.data.ndim != 4 or v.data.ndim != 2 or x.shape[:2] != v.shape:
        raise ShapeError(f"add_spatial: incompatible shapes {x.shape} and {v.shape}")
    _check_dtypes(x, v, "add_spatial")
    out = x.data + v.data[:, :, None, None]

    def bwd(g):
        return g, g.sum(axis=(2, 3))

    return _result(out, (x, v), bwd)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest2x: need [B,C,H,W], got {x.shape}")
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    bsz, c, h, w = x.shape

    def bwd(g):
        return (g.reshape(bsz, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), bwd)

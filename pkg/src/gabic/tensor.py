"""Dense tensors with a dynamic reverse-mode tape.

Every differentiable operation records its parents and a closure mapping the
output gradient to parent gradients.  The tape is rebuilt on each forward pass;
``Tensor.backward`` walks the reachable nodes in reverse creation order, which
is always a valid topological order.

Values are numpy arrays.  The working precision is 32-bit by default and can be
switched to 64-bit with :func:`precision` for gradient verification.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_SEQ = itertools.count()
_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


def get_dtype() -> np.dtype:
    return _DTYPE


def set_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the default float precision (32 or 64 bits)."""
    previous = _DTYPE
    set_dtype({32: np.float32, 64: np.float64}[bits])
    try:
        yield
    finally:
        set_dtype(previous)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Rng:
    """Counter-based deterministic generator (Philox-4x64).

    The stream is fully determined by ``(seed, counter)``; there is no hidden
    global state.  ``child`` derives an independent stream for a named purpose.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._bitgen = np.random.Philox(key=self.seed, counter=int(counter))
        self._gen = np.random.Generator(self._bitgen)

    @property
    def counter(self) -> int:
        words = self._bitgen.state["state"]["counter"]
        return int(words[0]) | (int(words[1]) << 64)

    def state(self) -> dict:
        return self._bitgen.state

    def set_state(self, state: dict) -> None:
        self._bitgen.state = state

    def child(self, tag: int) -> "Rng":
        mixed = (self.seed * 0x9E3779B97F4A7C15 + (int(tag) + 1) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
        return Rng(mixed)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "seq", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.seq = next(_SEQ)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self) -> int | None:
        return self.seq if self.requires_grad else None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- autodiff ------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every tape node."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ValueError("loss is not connected to the tape")

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes:
                continue
            nodes[id(node)] = node
            stack.extend(p for p in node._parents if p.requires_grad)

        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in sorted(nodes.values(), key=lambda t: t.seq, reverse=True):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Create a tape node.  ``backward(g)`` returns one gradient per parent."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.seq = next(_SEQ)
    out.name = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def square(x: Tensor) -> Tensor:
    return make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data).astype(x.data.dtype)
    return make(out, (x,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * x.data)),))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)
    return make(out, (x,), lambda g: (np.where(pos, g, slope * g),))


def clamp_min(x: Tensor, bound: float) -> Tensor:
    """max(x, bound); no gradient flows where the bound is active."""
    keep = x.data >= bound
    return make(np.where(keep, x.data, np.asarray(bound, x.data.dtype)), (x,), lambda g: (g * keep,))


def ste_round(x: Tensor) -> Tensor:
    """Round half away from zero with a straight-through gradient."""
    return make(round_half_away(x.data), (x,), lambda g: (g,))


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(v) + 0.5), v)


# -- reductions and shape ------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=True),)

    return make(np.asarray(out, dtype=x.data.dtype), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / float(count))


def reshape(x: Tensor, shape) -> Tensor:
    return make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def index_select(x: Tensor, index) -> Tensor:
    """Basic (slice-based) indexing."""
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make(out, tensors, backward)


def split(x: Tensor, sizes: Iterable[int], axis: int = 1) -> list[Tensor]:
    parts, start = [], 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + size)
        parts.append(index_select(x, tuple(index)))
        start += size
    if start != x.shape[axis]:
        raise ValueError(f"split sizes sum to {start}, axis {axis} has extent {x.shape[axis]}")
    return parts


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs ≥2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make(a.data @ b.data, (a, b), backward)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax.  Entries where ``mask`` is False get zero weight."""
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax input contains non-finite values")
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return make(out, (x,), backward)


# -- convolution ---------------------------------------------------------------

def _conv_out(extent: int, kernel: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - kernel) // stride + 1


def _check_conv(x: Tensor, w: Tensor, stride: int, pad: int, in_axis: int, kind: str) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"{kind}: expected 4-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[in_axis]:
        raise ValueError(
            f"{kind}: input has {x.shape[1]} channels but weight dim {in_axis} is {w.shape[in_axis]} "
            f"(input {x.shape}, weight {w.shape})"
        )
    if w.shape[2] != w.shape[3]:
        raise ValueError(f"{kind}: only square kernels are supported, got {w.shape[2:]}")
    if stride < 1 or pad < 0:
        raise ValueError(f"{kind}: stride must be ≥1 and pad ≥0 (stride={stride}, pad={pad})")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0,
           method: str = "im2col") -> Tensor:
    """2-d cross-correlation, NCHW input and (out, in, K, K) weight.

    ``method`` selects between the im2col contraction and direct accumulation
    over kernel offsets; both produce the same values up to rounding.
    """
    _check_conv(x, w, stride, pad, 1, "conv2d")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(wd, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {k} does not fit input {h}x{wd} with pad {pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1

    if k == 1:
        cols = None
        xs = xp[:, :, :hspan:stride, :wspan:stride]
        out = np.einsum("nchw,oc->nohw", xs, w.data[:, :, 0, 0], optimize=True)
    elif method == "im2col":
        cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    elif method == "direct":
        cols = None
        out = np.zeros((n, o, ho, wo), dtype=x.data.dtype)
        for kh in range(k):
            for kw in range(k):
                patch = xp[:, :, kh:kh + hspan:stride, kw:kw + wspan:stride]
                out += np.einsum("nchw,oc->nohw", patch, w.data[:, :, kh, kw], optimize=True)
    else:
        raise ValueError(f"unknown conv method {method!r}")
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out, dtype=x.data.dtype)

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.tensordot(g, w.data, axes=([1], [0]))  # n, ho, wo, c, k, k
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for kh in range(k):
                for kw in range(k):
                    gxp[:, :, kh:kh + hspan:stride, kw:kw + wspan:stride] += gcols[..., kh, kw].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        if w.requires_grad:
            if k == 1:
                gw = np.einsum("nohw,nchw->oc", g, xs, optimize=True)[:, :, None, None]
            else:
                win = cols if cols is not None else sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
                gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0,
                     output_padding: int = 0) -> Tensor:
    """Transposed convolution (gradient of conv2d w.r.t. its input).

    Weight layout is (in, out, K, K).  Output extent is
    ``(H - 1) * stride - 2 * pad + K + output_padding``.
    """
    _check_conv(x, w, stride, pad, 0, "conv_transpose2d")
    if not 0 <= output_padding < max(stride, 1):
        raise ValueError(f"conv_transpose2d: output_padding {output_padding} must be < stride {stride}")
    n, c, h, wd = x.shape
    _, o, k, _ = w.shape
    ho = (h - 1) * stride - 2 * pad + k + output_padding
    wo = (wd - 1) * stride - 2 * pad + k + output_padding
    if ho < 1 or wo < 1:
        raise ValueError(f"conv_transpose2d: empty output for input {h}x{wd}, kernel {k}, pad {pad}")
    hf, wf = ho + 2 * pad, wo + 2 * pad
    hspan, wspan = stride * (h - 1) + 1, stride * (wd - 1) + 1

    cols = np.tensordot(x.data, w.data, axes=([1], [0]))  # n, h, w, o, k, k
    full = np.zeros((n, o, max(hf, hspan + k - 1), max(wf, wspan + k - 1)), dtype=x.data.dtype)
    for kh in range(k):
        for kw in range(k):
            full[:, :, kh:kh + hspan:stride, kw:kw + wspan:stride] += cols[..., kh, kw].transpose(0, 3, 1, 2)
    out = full[:, :, pad:pad + ho, pad:pad + wo]
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out, dtype=x.data.dtype)

    def backward(g):
        gfull = np.zeros(full.shape, dtype=g.dtype)
        gfull[:, :, pad:pad + ho, pad:pad + wo] = g
        win = sliding_window_view(gfull, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h, :wd]
        gx = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3])) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, backward)


# -- verification ----------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                      coords: Sequence[int] | None = None) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|).

    ``x`` must be a leaf with ``requires_grad``; ``f(x)`` must return a scalar.
    ``coords`` restricts the check to a subset of flat indices.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.grad = None
    f(x).backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in indices:
            saved = flat[i]
            flat[i] = saved + eps
            up = float(f(x).data)
            flat[i] = saved - eps
            down = float(f(x).data)
            flat[i] = saved
            numeric = (up - down) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst

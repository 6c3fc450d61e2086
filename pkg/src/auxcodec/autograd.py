"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the tape that is active in the current
context (``with Tape() as tape:``). Outside a tape every op is a plain
numpy computation, which is how encode/decode inference runs.
"""

from __future__ import annotations

import contextvars
import math
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "active_tape", default=None
)

_SQRT_2PI = math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradCheckInapplicable(RuntimeError):
    """Raised when a function contains a non-differentiable op."""


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Recording order is a valid topological order, so the backward sweep
    walks the node list in reverse and visits every node exactly once.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._token = None
        self.nondifferentiable = False

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: "Tensor", parents: Sequence["Tensor"], backward: Callable):
        self._nodes.append(_Node(out, tuple(parents), backward))

    def clear(self):
        self._nodes.clear()
        self.nondifferentiable = False

    def backward(self, loss: "Tensor", grad: Optional[np.ndarray] = None) -> int:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad``.

        Returns the number of nodes whose backward function ran.
        """
        seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, np.float64)
        grads = {id(loss): seed}
        owners = {id(loss): loss}
        visited = 0
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            owners.pop(id(node.out), None)
            if g is None:
                continue
            visited += 1
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    owners[key] = parent
        for key, g in grads.items():
            leaf = owners[key]
            if leaf.grad is None:
                leaf.grad = np.array(g, dtype=np.float64)
            else:
                leaf.grad = leaf.grad + g
        return visited


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


class Tensor:
    """n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

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

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, parents, backward)
    return out


def mark_nondifferentiable():
    """Flag the active tape as containing a non-differentiable op."""
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.nondifferentiable = True


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise ShapeError(f"incompatible shapes {a} and {b}") from exc


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _make(
        np.logaddexp(0.0, a.data), (a,), lambda g: (g * special.expit(a.data),)
    )


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def maximum(a, floor: float) -> Tensor:
    """Elementwise max against a constant; gradient flows where a > floor."""
    a = as_tensor(a)
    mask = a.data > floor
    return _make(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def normal_cdf(a) -> Tensor:
    """Standard normal CDF."""
    a = as_tensor(a)
    return _make(
        special.ndtr(a.data),
        (a,),
        lambda g: (g * np.exp(-0.5 * a.data * a.data) / _SQRT_2PI,),
    )


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# --- reductions and shape ops ----------------------------------------------


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    total = sum_(a, axis, keepdims)
    return total * (total.size / a.size) if a.size else total


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _make(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inverse),),
    )


def getitem(a, index) -> Tensor:
    """Basic (slice/int) indexing only."""
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(np.array(out), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(f"cannot concat {ref} with {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=ax),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=ax)),
    )


def matmul(a, b) -> Tensor:
    """Batched matrix product; ``b`` may be 2-D and shared across the batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(
        out,
        (a,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
    )


def avg_pool2d(a, k: int) -> Tensor:
    a = as_tensor(a)
    B, C, H, W = a.shape
    if H % k or W % k:
        raise ShapeError(f"spatial dims {H}x{W} not divisible by pool size {k}")
    out = a.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def backward(g):
        g = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
        return (g / (k * k),)

    return _make(out, (a,), backward)


# --- convolutions ----------------------------------------------------------


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # [B, C, Ho, Wo, kh, kw] view
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _col2im(cols: np.ndarray, shape: tuple, stride: int) -> np.ndarray:
    """Scatter-add [B, Ho, Wo, C, kh, kw] columns into a [B, C, H, W] canvas."""
    B, Ho, Wo, C, kh, kw = cols.shape
    out = np.zeros(shape, dtype=np.float64)
    hi = stride * (Ho - 1) + 1
    wi = stride * (Wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + hi : stride, j : j + wi : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return out


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    kh, kw = w.shape[2:]
    win = _windows(_pad(x, padding), kh, kw, stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), win


def _check_conv(x: Tensor, w: Tensor, b: Optional[Tensor], cin_axis: int):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv expects 4-D input and weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[cin_axis]:
        raise ShapeError(
            f"channel mismatch: input has {x.shape[1]}, weight expects {w.shape[cin_axis]}"
        )
    cout = w.shape[1 - cin_axis]
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape} does not match {cout} output channels")


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``w`` is [Cout, Cin, kh, kw]."""
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    _check_conv(x, w, b, cin_axis=1)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    H, W = x.shape[2:]
    kh, kw = w.shape[2:]
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError(f"input {H}x{W} (pad {padding}) smaller than kernel {kh}x{kw}")
    out, win = _conv_forward(x.data, w.data, stride, padding)
    if b is not None:
        out += b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        B, _, Ho, Wo = g.shape
        cols = np.tensordot(g.transpose(0, 2, 3, 1), w.data, axes=([3], [0]))
        Hp, Wp = H + 2 * padding, W + 2 * padding
        gx = _col2im(cols, (B, x.shape[1], Hp, Wp), stride)
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    return _make(out, parents, backward)


def conv_transpose2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`. ``w`` is [Cin, Cout, kh, kw] (conv2d layout)."""
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    _check_conv(x, w, b, cin_axis=0)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    B, _, H, W = x.shape
    cout, kh, kw = w.shape[1:]
    Hf, Wf = (H - 1) * stride + kh, (W - 1) * stride + kw
    if Hf - 2 * padding < 1 or Wf - 2 * padding < 1:
        raise ShapeError("padding larger than transposed output")
    cols = np.tensordot(x.data.transpose(0, 2, 3, 1), w.data, axes=([3], [0]))
    full = _col2im(cols, (B, cout, Hf, Wf), stride)
    out = full[:, :, padding : Hf - padding, padding : Wf - padding]
    out = np.ascontiguousarray(out)
    if b is not None:
        out += b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gfull = _pad(g, padding)
        gx, win = _conv_forward(gfull, w.data, stride, 0)
        gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    return _make(out, parents, backward)


# --- verification ----------------------------------------------------------


def grad_check(
    f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5
) -> float:
    """Max relative error between tape gradients and central differences.

    The error per element is ``|analytic - numeric| / max(1, |analytic|)``.
    Returns ``inf`` when either evaluation produces non-finite values.
    Raises :class:`GradCheckInapplicable` if ``f`` records a
    non-differentiable op (rounding).
    """
    inputs = [Tensor(t.data.copy(), requires_grad=True) for t in inputs]
    with Tape() as tape:
        out = f(*inputs)
    if out.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    if tape.nondifferentiable:
        raise GradCheckInapplicable("function contains a non-differentiable op")
    if not np.all(np.isfinite(out.data)):
        return math.inf
    tape.backward(out)
    worst = 0.0
    for k, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(analytic)):
            return math.inf
        base = [Tensor(u.data) for u in inputs]
        flat = base[k].data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = float(f(*base).data)
            flat[idx] = orig - h
            fm = float(f(*base).data)
            flat[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            if not (math.isfinite(fp) and math.isfinite(fm)):
                return math.inf
            a = analytic.reshape(-1)[idx]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst

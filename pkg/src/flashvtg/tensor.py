"""Reverse-mode autodiff over float64 numpy arrays.

Small, dense, single-threaded tensor core: exactly the operations the
grounding model needs, each with a hand-written backward closure. Every
forward op validates finiteness (NaN/Inf anywhere is an error, raised
immediately rather than propagated). Gradients accumulate into ``.grad``
of every tracked node; leaves (parameters) keep theirs after ``backward``.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "transpose",
    "reshape",
    "narrow",
    "concat",
    "take",
    "tsum",
    "tmean",
    "tabs",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "log_sigmoid",
    "logsumexp",
    "masked_softmax",
    "masked_max",
    "masked_min",
    "conv1d",
    "conv1d_output_length",
    "layer_norm",
    "min_max_normalize",
]

class _GradMode(threading.local):
    enabled = True


_GRAD_MODE = _GradMode()


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path).

    The flag is thread-local so concurrent inference threads do not toggle
    each other's tape construction.
    """
    prev = _GRAD_MODE.enabled
    _GRAD_MODE.enabled = False
    try:
        yield
    finally:
        _GRAD_MODE.enabled = prev


def grad_enabled() -> bool:
    return _GRAD_MODE.enabled


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")


class Tensor:
    """A float64 array plus an optional gradient accumulator.

    ``_parents``/``_backward`` form the tape; they are empty on leaves and
    on anything created under ``no_grad()``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        _ensure_finite(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-accumulate gradients from this scalar into the graph."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar over the module-level ops
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __pow__(self, p):
        return tpow(self, float(p))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _track(*parents: Tensor) -> bool:
    return _GRAD_MODE.enabled and any(p.requires_grad for p in parents)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    _ensure_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _track(*parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    # callers always pass g already reduced to t's exact shape
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- arithmetic ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, "mul", (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, "div", (a, b), backward)


def tpow(a: Tensor, p: float) -> Tensor:
    data = a.data**p

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make(data, "pow", (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul shape mismatch: {a.data.shape} x {b.data.shape}"
        )
    data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(data, "matmul", (a, b), backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over matching leading axes (3-D operands)."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[0] != b.data.shape[0]:
        raise ValueError(f"bmm shape mismatch: {a.data.shape} x {b.data.shape}")
    if a.data.shape[2] != b.data.shape[1]:
        raise ValueError(f"bmm inner-dim mismatch: {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.swapaxes(1, 2))
        _accum(b, a.data.swapaxes(1, 2) @ g)

    return _make(data, "bmm", (a, b), backward)


# --- shape ---------------------------------------------------------------


def transpose(a: Tensor) -> Tensor:
    data = a.data.T.copy()

    def backward(g):
        _accum(a, g.T)

    return _make(data, "transpose", (a,), backward)


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = np.argsort(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g):
        _accum(a, g.transpose(inverse))

    return _make(data, "permute", (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.data.shape
    data = a.data.reshape(shape).copy()

    def backward(g):
        _accum(a, g.reshape(src))

    return _make(data, "reshape", (a,), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _make(data, "narrow", (a,), backward)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g):
        off = 0
        for p, n in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(off, off + n)
            _accum(p, g[tuple(idx)])
            off += n

    return _make(data, "concat", tuple(parts), backward)


def take(a: Tensor, indices) -> Tensor:
    """Gather rows (axis 0); duplicate indices accumulate in the backward."""
    idx = np.asarray(indices, dtype=np.int64)
    data = a.data[idx].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _make(data, "take", (a,), backward)


# --- reductions ----------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(np.asarray(data, dtype=np.float64), "sum", (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


def tabs(a: Tensor) -> Tensor:
    data = np.abs(a.data)
    sign = np.sign(a.data)

    def backward(g):
        _accum(a, g * sign)

    return _make(data, "abs", (a,), backward)


# --- elementwise nonlinearities -------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # gradient at exactly 0 is defined as 0
    data = np.where(mask, a.data, 0.0)

    def backward(g):
        _accum(a, g * mask)

    return _make(data, "relu", (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)

    def backward(g):
        _accum(a, g * s * (1.0 - s))

    return _make(s, "sigmoid", (a,), backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)  # overflow surfaces via the finite guard

    def backward(g):
        _accum(a, g * data)

    return _make(data, "exp", (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _make(data, "log", (a,), backward)


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)), computed stably for large |x|."""
    data = -np.logaddexp(0.0, -a.data)

    def backward(g):
        _accum(a, g * _sigmoid(-a.data))

    return _make(data, "log_sigmoid", (a,), backward)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    z = np.exp(a.data - m)
    s = z.sum(axis=axis, keepdims=True)
    data = np.squeeze(m + np.log(s), axis=axis)
    soft = z / s

    def backward(g):
        _accum(a, np.expand_dims(g, axis) * soft)

    return _make(data, "logsumexp", (a,), backward)


# --- masked ops ------------------------------------------------------------


def _as_mask(mask, shape: tuple[int, ...]) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask, dtype=bool)
    return np.broadcast_to(m, shape)


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Softmax over the last axis; masked positions output exactly 0.

    Max-subtraction stabilized. Raises when a row has no valid position.
    """
    m = _as_mask(mask, logits.data.shape)
    if not m.any(axis=-1).all():
        raise ValueError("masked_softmax: all positions masked")
    shifted = np.where(m, logits.data, -np.inf)
    mx = shifted.max(axis=-1, keepdims=True)
    z = np.where(m, np.exp(shifted - mx), 0.0)
    s = z / z.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        _accum(logits, s * (g - inner))

    return _make(s, "masked_softmax", (logits,), backward)


def _masked_extreme(a: Tensor, mask, find_max: bool) -> Tensor:
    m = _as_mask(mask, a.data.shape)
    if not m.any():
        raise ValueError("reduction over an empty valid set")
    flat = a.data.reshape(-1)
    mflat = m.reshape(-1)
    vals = np.where(mflat, flat, -np.inf if find_max else np.inf)
    pos = int(np.argmax(vals) if find_max else np.argmin(vals))
    data = np.asarray(flat[pos])

    def backward(g):
        full = np.zeros_like(flat)
        full[pos] = g
        _accum(a, full.reshape(a.data.shape))

    return _make(data, "masked_max" if find_max else "masked_min", (a,), backward)


def masked_max(a: Tensor, mask) -> Tensor:
    return _masked_extreme(a, mask, find_max=True)


def masked_min(a: Tensor, mask) -> Tensor:
    return _masked_extreme(a, mask, find_max=False)


# --- convolution -----------------------------------------------------------


def conv1d_output_length(length: int, stride: int) -> int:
    return -(-length // stride)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Same-padded 1-D convolution over (length, channels) input.

    ``weight`` is (width, c_in, c_out); output length is ceil(L/stride).
    """
    if stride < 1:
        raise ValueError("conv1d stride must be >= 1")
    if x.data.ndim != 2 or weight.data.ndim != 3:
        raise ValueError("conv1d expects (L, c_in) input and (w, c_in, c_out) weight")
    w, cin_w, cout = weight.data.shape
    if w % 2 == 0:
        raise ValueError("same-padding conv1d requires odd kernel width")
    length, cin = x.data.shape
    if cin != cin_w:
        raise ValueError(f"conv1d channel mismatch: input {cin}, weight {cin_w}")
    lout = conv1d_output_length(length, stride)
    pad_total = max((lout - 1) * stride + w - length, 0)
    pad_left = pad_total // 2

    xp = np.zeros((length + pad_total, cin))
    xp[pad_left : pad_left + length] = x.data
    out = np.zeros((lout, cout))
    span = (lout - 1) * stride + 1
    for j in range(w):
        out += xp[j : j + span : stride] @ weight.data[j]
    if bias is not None:
        out += bias.data

    def backward(g):
        if bias is not None:
            _accum(bias, g.sum(axis=0))
        gw = np.zeros_like(weight.data)
        gxp = np.zeros_like(xp)
        for j in range(w):
            seg = xp[j : j + span : stride]
            gw[j] = seg.T @ g
            gxp[j : j + span : stride] += g @ weight.data[j].T
        _accum(weight, gw)
        _accum(x, gxp[pad_left : pad_left + length])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, "conv1d", parents, backward)


# --- composite ops -----------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine."""
    m = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, m)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = tpow(add(var, Tensor(eps)), -0.5)
    return add(mul(mul(centered, inv), gain), shift)


def min_max_normalize(v: Tensor, mask) -> Tensor:
    """Map valid entries to (x - min)/(max - min); invalid entries to 0.

    A constant valid range collapses to all zeros (and carries no gradient).
    """
    m = _as_mask(mask, v.data.shape)
    if not m.any():
        raise ValueError("min_max_normalize over an empty valid set")
    hi = masked_max(v, m)
    lo = masked_min(v, m)
    if hi.data == lo.data:
        return Tensor(np.zeros_like(v.data))
    scaled = div(sub(v, lo), sub(hi, lo))
    return mul(scaled, Tensor(m.astype(np.float64)))

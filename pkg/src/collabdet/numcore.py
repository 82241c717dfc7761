"""Dense float64 tensors with a tape-based reverse-mode differentiation engine.

Only the operations the detection pipeline needs are provided. Every op works
on numpy arrays internally; when a :class:`Tape` is active and at least one
input requires gradients, the op records a backward closure on the tape.

    >>> p = Parameter(np.array([1.0, 2.0, 3.0]), name="p")
    >>> with Tape() as tape:
    ...     loss = (p * p).sum()
    >>> tape.backward(loss)
    >>> p.grad
    array([2., 4., 6.])
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "collabdet_active_tape", default=None
)
_DTYPE: contextvars.ContextVar[type] = contextvars.ContextVar("collabdet_dtype", default=np.float64)


class Tensor:
    """A float64 (or, inside ``extended_precision``, long double) array that may
    take part in differentiation."""

    __slots__ = ("data", "requires_grad", "_tape")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DTYPE.get())
        self.requires_grad = requires_grad
        self._tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    # arithmetic
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Parameter(Tensor):
    """A named learnable tensor with an accumulated gradient."""

    __slots__ = ("name", "grad")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops; use as a context manager."""

    def __init__(self):
        self.records: list[_Record] = []
        self._token = None

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise RuntimeError("tape is already active")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(param) into ``grad`` of every reachable Parameter."""
        if loss.data.size != 1 or loss.data.ndim != 0:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        if loss._tape is not self:
            raise ValueError("loss was not produced under this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if isinstance(t, Parameter):
                    t.grad += gi
                else:
                    key = id(t)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi


def backward(loss: Tensor) -> None:
    """Run reverse accumulation on the tape that produced ``loss``."""
    if loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ValueError("loss was not produced under an active tape")
    loss._tape.backward(loss)


@contextlib.contextmanager
def extended_precision():
    """Compute new tensors in long double (used by finite-difference oracles)."""
    token = _DTYPE.set(np.longdouble)
    try:
        yield
    finally:
        _DTYPE.reset(token)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.records.append(_Record(out, tuple(inputs), backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), bw)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


# ---------------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def tmax(a, axis: int) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = a.shape

    def bw(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, (a,), bw)


def segment_max(x, segment_ids: np.ndarray, n_segments: int) -> Tensor:
    """Row-wise max of ``x`` (n, D) grouped by ``segment_ids``; empty segments give 0.

    Gradient flows to the lowest-index row attaining each maximum.
    """
    x = as_tensor(x)
    seg = np.asarray(segment_ids, dtype=np.int64)
    n, d = x.shape
    out = np.zeros((n_segments, d))
    if n == 0:
        return _make(out, (x,), lambda g: (np.zeros((0, d)),))
    order = np.argsort(seg, kind="stable")
    seg_sorted = seg[order]
    xs = x.data[order]
    starts = np.flatnonzero(np.r_[True, seg_sorted[1:] != seg_sorted[:-1]])
    present = seg_sorted[starts]
    mx = np.maximum.reduceat(xs, starts, axis=0)
    out[present] = mx
    # first sorted row reaching the max, per segment and channel
    seg_rank = np.cumsum(np.r_[True, seg_sorted[1:] != seg_sorted[:-1]]) - 1
    hit = xs == mx[seg_rank]
    cand = np.where(hit, order[:, None], n)
    first = np.minimum.reduceat(cand, starts, axis=0)

    def bw(g):
        gx = np.zeros((n, d))
        cols = np.broadcast_to(np.arange(d), first.shape)
        np.add.at(gx, (first, cols), g[present])
        return (gx,)

    return _make(out, (x,), bw)


def scatter_rows(x, rows: np.ndarray, n_rows: int) -> Tensor:
    """Place rows of ``x`` (n, D) at ``rows`` of a zero (n_rows, D) array (summing duplicates)."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    out = np.zeros((n_rows,) + x.shape[1:])
    np.add.at(out, rows, x.data)
    return _make(out, (x,), lambda g: (g[rows],))


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    adv = _is_advanced(index)

    def bw(g):
        gx = np.zeros(shape)
        if adv:
            np.add.at(gx, index, g)
        else:
            gx[index] += g
        return (gx,)

    return _make(a.data[index], (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(np.stack([t.data for t in ts], axis=axis), ts, bw)


def unfold_neighbors(x, k: int) -> tuple[Tensor, np.ndarray]:
    """Gather each cell's k×k neighbourhood from ``x`` shaped (..., H, W, D).

    Returns a tensor shaped (..., H, W, k*k, D) with zeros outside the grid and a
    boolean (H, W, k*k) array marking in-grid neighbours.
    """
    if k % 2 != 1:
        raise ValueError(f"neighbourhood size must be odd, got {k}")
    x = as_tensor(x)
    *lead, h, w, d = x.shape
    r = k // 2
    pad = [(0, 0)] * len(lead) + [(r, r), (r, r), (0, 0)]
    xp = np.pad(x.data, pad)
    offsets = [(dy, dx) for dy in range(k) for dx in range(k)]
    out = np.stack([xp[..., dy:dy + h, dx:dx + w, :] for dy, dx in offsets], axis=-2)
    valid = np.zeros((h + 2 * r, w + 2 * r), dtype=bool)
    valid[r:r + h, r:r + w] = True
    valid = np.stack([valid[dy:dy + h, dx:dx + w] for dy, dx in offsets], axis=-1)

    def bw(g):
        gp = np.zeros(xp.shape)
        for j, (dy, dx) in enumerate(offsets):
            gp[..., dy:dy + h, dx:dx + w, :] += g[..., j, :]
        return (gp[..., r:r + h, r:r + w, :],)

    return _make(out, (x,), bw), valid


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def masked_softmax(x, valid, axis: int = -1) -> Tensor:
    """Softmax restricted to ``valid`` entries; invalid entries come out exactly 0."""
    x = as_tensor(x)
    valid = np.broadcast_to(np.asarray(valid, dtype=bool), x.shape)
    if not valid.any(axis=axis).all():
        raise ValueError("masked_softmax: a slice has no valid entries")
    z = np.where(valid, x.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.where(valid, np.exp(z), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def conv2d(x, kernel, bias=None) -> Tensor:
    """Stride-1 same-padded 2-D cross-correlation.

    ``x`` is (Cin, H, W) or (B, Cin, H, W); ``kernel`` is (Cout, Cin, k, k).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    bsz, cin, h, w = xd.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ValueError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if kh != kw or kh % 2 != 1:
        raise ValueError(f"conv2d needs an odd square kernel, got {kernel.shape}")
    r = kh // 2
    # same padding makes the padded extent h + 2r >= kh always; a kernel wider
    # than the map itself would mostly see padding, so reject that instead
    if kh > h or kw > w:
        raise ValueError(f"kernel {kernel.shape} larger than input {x.shape}")
    xp = np.pad(xd, ((0, 0), (0, 0), (r, r), (r, r)))
    offsets = [(dy, dx) for dy in range(kh) for dx in range(kw)]
    # cols[b, ci, j, h, w] with j the kernel offset, flattened as (ci, j)
    cols = np.stack([xp[:, :, dy:dy + h, dx:dx + w] for dy, dx in offsets], axis=2)
    cols = cols.reshape(bsz, cin * kh * kw, h * w)
    wmat = kernel.data.reshape(cout, cin * kh * kw)
    out = (wmat @ cols).reshape(bsz, cout, h, w)
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)

    def bw(g):
        g4 = g[None] if squeeze else g
        g2 = g4.reshape(bsz, cout, h * w)
        grads = []
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(bsz, cin, kh * kw, h, w)
            gp = np.zeros_like(xp)
            for j, (dy, dx) in enumerate(offsets):
                gp[:, :, dy:dy + h, dx:dx + w] += dcols[:, :, j]
            gx = gp[:, :, r:r + h, r:r + w]
            grads.append(gx[0] if squeeze else gx)
        else:
            grads.append(None)
        if kernel.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
            grads.append(gw)
        else:
            grads.append(None)
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return tuple(grads)

    return _make(out[0] if squeeze else out, inputs, bw)


def max_pool_peaks(h, kernel: int = 3) -> np.ndarray:
    """Mark cells equal to the max of their kernel×kernel window (−inf padding).

    ``h`` is (..., H, W). Ties mark every tied cell. A cell whose whole window is
    flat is background, not a peak, unless its entire plane is constant (then
    every cell ties and all are marked). Not differentiable.
    """
    hd = h.data if isinstance(h, Tensor) else np.asarray(h, dtype=np.float64)
    if kernel % 2 != 1:
        raise ValueError(f"peak kernel must be odd, got {kernel}")
    r = kernel // 2
    *lead, hh, ww = hd.shape
    pad = [(0, 0)] * len(lead) + [(r, r), (r, r)]
    hp = np.pad(hd, pad, constant_values=-np.inf)
    hq = np.pad(hd, pad, constant_values=np.inf)
    mx = np.full(hd.shape, -np.inf)
    mn = np.full(hd.shape, np.inf)
    for dy in range(kernel):
        for dx in range(kernel):
            np.maximum(mx, hp[..., dy:dy + hh, dx:dx + ww], out=mx)
            np.minimum(mn, hq[..., dy:dy + hh, dx:dx + ww], out=mn)
    flat_plane = (hd.max(axis=(-2, -1), keepdims=True) == hd.min(axis=(-2, -1), keepdims=True))
    return (hd == mx) & ((mn < mx) | flat_plane)

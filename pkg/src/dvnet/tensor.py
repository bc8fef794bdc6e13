"""Minimal N-d tensor engine with reverse-mode differentiation.

Only the operations DVNet needs are provided. Tensors use the layout
``(batch, channels, *spatial)`` with one to three spatial axes. Every
operation that touches a tensor with ``requires_grad`` appends a node to the
active :class:`Graph`; :func:`backward` walks those nodes in exact reverse
execution order.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

# GEMM temporaries above this many bytes fall back to a per-offset loop.
_BIG_GEMM_BYTES = 96 * 2**20


class Tensor:
    """A numpy array plus a gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.is_leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def spatial_shape(self) -> tuple:
        return self.data.shape[2:]

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, graph: Optional["Graph"] = None) -> None:
        backward(graph if graph is not None else current_graph(), self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


@dataclass
class Node:
    output: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


@dataclass
class Graph:
    """Tape of executed operations, in execution order."""

    nodes: list = field(default_factory=list)

    def record(self, op: str, output: Tensor, inputs: Sequence[Tensor], fn) -> None:
        output.is_leaf = False
        self.nodes.append(Node(output, tuple(inputs), fn, op))

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


class _State(threading.local):
    """Per-thread tape stack and recording switch."""

    def __init__(self):
        self.stack = [Graph()]
        self.grad_enabled = True


_state = _State()


def current_graph() -> Graph:
    return _state.stack[-1]


@contextlib.contextmanager
def recording(graph: Graph):
    """Record operations onto ``graph`` instead of the default tape."""
    _state.stack.append(graph)
    try:
        yield graph
    finally:
        _state.stack.pop()


@contextlib.contextmanager
def no_grad():
    """Disable recording; intermediates are freed as soon as they die."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _wants_grad(*tensors: Tensor) -> bool:
    return _state.grad_enabled and any(t.requires_grad for t in tensors)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], fn) -> Tensor:
    out = Tensor(data)
    if _wants_grad(*inputs):
        out.requires_grad = True
        current_graph().record(op, out, inputs, fn)
    return out


def backward(graph: Graph, loss: Tensor, retain_grad: bool = False) -> None:
    """Propagate d(loss)/d(.) back through ``graph``.

    Leaf tensors accumulate into ``.grad`` across calls. Intermediate gradients
    are discarded once consumed unless ``retain_grad`` is set.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        if retain_grad:
            node.output.grad = g if node.output.grad is None else node.output.grad + g
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    if loss.is_leaf and loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, factor: float) -> Tensor:
    return _make(a.data * factor, "scale", (a,), lambda g: (g * factor,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(
        np.asarray(a.data.sum(), dtype=a.dtype), "sum", (a,),
        lambda g: (np.broadcast_to(g, shape).astype(g.dtype, copy=True),),
    )


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    return _make(
        np.asarray(a.data.mean(), dtype=a.dtype), "mean", (a,),
        lambda g: (np.full(shape, g / n, dtype=g.dtype),),
    )


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def fn(g):
        return (g * (out > 0),)

    return _make(out, "relu", (x,), fn)


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), "log", (x,), lambda g: (g / xd,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape, dtype=np.float32) >= rate)
    mask = keep.astype(x.dtype) / (1.0 - rate)
    return _make(x.data * mask, "dropout", (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# channel ops


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        for axis, (m, n) in enumerate(zip(a.shape, b.shape)):
            if axis != 1 and m != n:
                raise ValueError(f"concat_channels: extent mismatch on axis {axis}: {m} vs {n}")
        raise ValueError(f"concat_channels: rank mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _make(out, "concat", (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop].copy(), "slice", (x,), fn)


def softmax_channels(logits: Tensor) -> Tensor:
    a = logits.data
    e = np.exp(a - a.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, "softmax", (logits,), fn)


# ---------------------------------------------------------------------------
# normalisation


@dataclass
class RunningStats:
    """Per-channel running mean/variance for batch norm."""

    mean: np.ndarray
    var: np.ndarray
    initialized: bool = False
    momentum: float = 0.9

    @classmethod
    def zeros(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


BN_EPS = 1e-5


def batch_norm(
    x: Tensor,
    scale_: Tensor,
    shift: Tensor,
    training: bool,
    stats: Optional[RunningStats] = None,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalisation over batch and spatial axes."""
    c = x.shape[1]
    if scale_.shape != (c,) or shift.shape != (c,):
        raise ValueError(
            f"batch_norm: scale/shift extents {scale_.shape}/{shift.shape} != channels {c}"
        )
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data
    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if stats is not None:
            n = xd.size // c
            unbiased = var * (n / (n - 1)) if n > 1 else var
            if stats.initialized:
                m = stats.momentum
                stats.mean = (m * stats.mean + (1 - m) * mean).astype(stats.mean.dtype)
                stats.var = (m * stats.var + (1 - m) * unbiased).astype(stats.var.dtype)
            else:
                stats.mean = mean.astype(stats.mean.dtype)
                stats.var = unbiased.astype(stats.var.dtype)
                stats.initialized = True
    else:
        if stats is None or not stats.initialized:
            raise RuntimeError("batch_norm: eval mode before any train-mode call (uninitialised statistics)")
        mean = stats.mean.astype(xd.dtype)
        var = stats.var.astype(xd.dtype)
    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    mean = mean.astype(xd.dtype)
    a = (scale_.data * invstd).reshape(bshape)
    b = (shift.data - mean * scale_.data * invstd).reshape(bshape)
    out = xd * a + b

    sd = scale_.data

    def fn(g):
        xhat = (xd - mean.reshape(bshape)) * invstd.reshape(bshape)
        dshift = g.sum(axis=axes)
        dscale = (g * xhat).sum(axis=axes)
        if training:
            n = xd.size // c
            k = (sd * invstd / n).reshape(bshape)
            dx = k * (n * g - dshift.reshape(bshape) - xhat * dscale.reshape(bshape))
        else:
            dx = g * (sd * invstd).reshape(bshape)
        return (dx.astype(xd.dtype, copy=False), dscale, dshift)

    return _make(out, "batch_norm", (x, scale_, shift), fn)


# ---------------------------------------------------------------------------
# pooling


def avg_pool_nd(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    stride = window if stride is None else stride
    spatial = x.shape[2:]
    for axis, n in enumerate(spatial):
        if window > n:
            raise ValueError(f"avg_pool_nd: window {window} exceeds extent {n} on spatial axis {axis}")
        if n % stride:
            raise ValueError(f"avg_pool_nd: extent {n} on spatial axis {axis} not divisible by stride {stride}")
    out_ext = tuple((n - window) // stride + 1 for n in spatial)
    r = len(spatial)
    inv = 1.0 / window**r
    xd = x.data
    if window == stride:
        shp = x.shape[:2] + sum(((m, window) for m in out_ext), ())
        out = xd.reshape(shp).mean(axis=tuple(range(3, 3 + 2 * r, 2)))
    else:
        out = np.zeros(x.shape[:2] + out_ext, dtype=xd.dtype)
        for off in np.ndindex(*(window,) * r):
            out += xd[_window_slices(off, out_ext, stride)]
        out *= inv
    shape = x.shape

    def fn(g):
        dx = np.zeros(shape, dtype=g.dtype)
        gi = g * inv
        for off in np.ndindex(*(window,) * r):
            dx[_window_slices(off, out_ext, stride)] += gi
        return (dx,)

    return _make(out.astype(xd.dtype, copy=False), "avg_pool", (x,), fn)


def _window_slices(offset, out_ext, stride):
    return (slice(None), slice(None)) + tuple(
        slice(o, o + stride * (m - 1) + 1, stride) for o, m in zip(offset, out_ext)
    )


# ---------------------------------------------------------------------------
# convolution


def _check_conv(x: Tensor, w: Tensor, in_axis: int, opname: str) -> int:
    r = x.ndim - 2
    if r not in (1, 2, 3):
        raise ValueError(f"{opname}: spatial rank must be 1, 2 or 3, got {r}")
    if w.ndim - 2 != r:
        raise ValueError(f"{opname}: kernel spatial rank {w.ndim - 2} != input spatial rank {r}")
    if w.shape[in_axis] != x.shape[1]:
        raise ValueError(
            f"{opname}: kernel axis {in_axis} has {w.shape[in_axis]} input channels, "
            f"input axis 1 has {x.shape[1]}"
        )
    return r


def _flat_plan(padded_shape, kernel_shape):
    """Flat-index shifts of every kernel offset on a C-ordered padded grid."""
    strides = np.cumprod((1,) + tuple(padded_shape[::-1]))[:-1][::-1]
    offsets = list(np.ndindex(*kernel_shape))
    shifts = [int(np.dot(o, strides)) for o in offsets]
    return shifts, int(np.prod(padded_shape))


def _corr_stride1(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of an already padded input.

    The kernel offsets become constant shifts on the flattened padded grid, so
    each offset is one strided GEMM with no im2col copy.
    """
    B, cin = xp.shape[:2]
    cout = w.shape[0]
    K = w.shape[2:]
    P = xp.shape[2:]
    out_ext = tuple(p - k + 1 for p, k in zip(P, K))
    shifts, pvol = _flat_plan(P, K)
    kvol = len(shifts)
    L = pvol - shifts[-1]
    wo = np.ascontiguousarray(w.reshape(cout, cin, kvol).transpose(2, 0, 1))
    crop = (slice(None),) + tuple(slice(0, m) for m in out_ext)
    out = np.empty((B, cout) + out_ext, dtype=xp.dtype)
    big = kvol * cout * pvol * xp.itemsize <= _BIG_GEMM_BYTES
    buf = np.empty((cout, pvol), dtype=xp.dtype)
    tmp = None if big else np.empty((cout, L), dtype=xp.dtype)
    for b in range(B):
        X = np.ascontiguousarray(xp[b]).reshape(cin, pvol)
        if big:
            Y = (wo.reshape(kvol * cout, cin) @ X).reshape(kvol, cout, pvol)
            buf[:, :L] = Y[0, :, :L]
            for o in range(1, kvol):
                s = shifts[o]
                buf[:, :L] += Y[o, :, s:s + L]
        else:
            np.matmul(wo[0], X[:, :L], out=buf[:, :L])
            for o in range(1, kvol):
                s = shifts[o]
                np.matmul(wo[o], X[:, s:s + L], out=tmp)
                buf[:, :L] += tmp
        out[b] = buf.reshape((cout,) + P)[crop]
    return out


def _corr_stride1_backward(xp: np.ndarray, w: np.ndarray, gy: np.ndarray):
    """Gradients of :func:`_corr_stride1` w.r.t. padded input and kernel."""
    B, cin = xp.shape[:2]
    cout = w.shape[0]
    K = w.shape[2:]
    P = xp.shape[2:]
    out_ext = gy.shape[2:]
    shifts, pvol = _flat_plan(P, K)
    kvol = len(shifts)
    L = pvol - shifts[-1]
    wo = np.ascontiguousarray(w.reshape(cout, cin, kvol).transpose(2, 0, 1))
    crop = (slice(None),) + tuple(slice(0, m) for m in out_ext)
    gw = np.zeros((kvol, cout, cin), dtype=gy.dtype)
    gx = np.empty(xp.shape, dtype=gy.dtype)
    G = np.zeros((cout,) + P, dtype=gy.dtype)
    big = kvol * cin * L * xp.itemsize <= _BIG_GEMM_BYTES
    for b in range(B):
        X = np.ascontiguousarray(xp[b]).reshape(cin, pvol)
        G[crop] = gy[b]
        Gf = G.reshape(cout, pvol)[:, :L]
        DX = np.zeros((cin, pvol), dtype=gy.dtype)
        if big:
            D = (wo.transpose(0, 2, 1).reshape(kvol * cin, cout) @ Gf).reshape(kvol, cin, L)
        for o in range(kvol):
            s = shifts[o]
            gw[o] += Gf @ X[:, s:s + L].T
            DX[:, s:s + L] += D[o] if big else wo[o].T @ Gf
        gx[b] = DX.reshape((cin,) + P)
    gw = np.ascontiguousarray(gw.transpose(1, 2, 0)).reshape(w.shape)
    return gx, gw


def _pad_spatial(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    r = x.ndim - 2
    return np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * r)


def _unpad_spatial(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return x[(slice(None), slice(None)) + (slice(padding, -padding),) * (x.ndim - 2)]


def conv_nd(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """N-d cross-correlation (no kernel flip).

    ``kernel`` has shape ``(out_channels, in_channels, *k)``. Output extent per
    axis is ``(n + 2*padding - k) // stride + 1``.
    """
    r = _check_conv(x, kernel, 1, "conv_nd")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv_nd: invalid stride {stride} / padding {padding}")
    for axis, (n, k) in enumerate(zip(x.shape[2:], kernel.shape[2:])):
        if n + 2 * padding < k:
            raise ValueError(f"conv_nd: kernel extent {k} exceeds padded input extent {n + 2 * padding} on spatial axis {axis}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ValueError(f"conv_nd: bias shape {bias.shape} != ({kernel.shape[0]},)")
    xd, wd = x.data, kernel.data
    K = wd.shape[2:]
    pointwise = all(k == 1 for k in K) and stride == 1 and padding == 0
    if pointwise:
        B, cin = xd.shape[:2]
        w2 = wd.reshape(wd.shape[0], cin)
        out = np.matmul(w2, xd.reshape(B, cin, -1)).reshape((B, wd.shape[0]) + xd.shape[2:])
        xp = None
    else:
        xp = _pad_spatial(xd, padding)
        full = _corr_stride1(xp, wd)
        out = full[(slice(None), slice(None)) + (slice(None, None, stride),) * r] if stride > 1 else full
        full_shape = full.shape
    if bias is not None:
        out += bias.data.reshape((1, -1) + (1,) * r)
    out = np.ascontiguousarray(out)
    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    axes = (0,) + tuple(range(2, 2 + r))

    def fn(g):
        if pointwise:
            B, cin = xd.shape[:2]
            gf = g.reshape(B, g.shape[1], -1)
            xf = xd.reshape(B, cin, -1)
            gx = np.matmul(w2.T, gf).reshape(xd.shape)
            gw = sum(gf[b] @ xf[b].T for b in range(B)).reshape(wd.shape)
        else:
            if stride > 1:
                gfull = np.zeros(full_shape, dtype=g.dtype)
                gfull[(slice(None), slice(None)) + (slice(None, None, stride),) * r] = g
            else:
                gfull = g
            gxp, gw = _corr_stride1_backward(xp, wd, gfull)
            gx = _unpad_spatial(gxp, padding)
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=axes),)
        return grads

    return _make(out, "conv", inputs, fn)


def conv_transpose_nd(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Adjoint of :func:`conv_nd`.

    ``kernel`` has shape ``(in_channels, out_channels, *k)``, i.e. the same
    array a forward convolution from ``out_channels`` to ``in_channels`` would
    use. Output extent per axis is
    ``stride*(n-1) + k - 2*padding + output_padding``.
    """
    r = _check_conv(x, kernel, 0, "conv_transpose_nd")
    if stride < 1 or padding < 0 or not 0 <= output_padding < stride:
        raise ValueError(
            f"conv_transpose_nd: invalid stride {stride} / padding {padding} / output_padding {output_padding}"
        )
    if bias is not None and bias.shape != (kernel.shape[1],):
        raise ValueError(f"conv_transpose_nd: bias shape {bias.shape} != ({kernel.shape[1]},)")
    xd, wd = x.data, kernel.data
    B, cin = xd.shape[:2]
    cout = wd.shape[1]
    S = xd.shape[2:]
    K = wd.shape[2:]
    out_ext = tuple(stride * (n - 1) + k - 2 * padding + output_padding for n, k in zip(S, K))
    for axis, m in enumerate(out_ext):
        if m < 1:
            raise ValueError(f"conv_transpose_nd: non-positive output extent {m} on spatial axis {axis}")
    full_ext = tuple(max(stride * (n - 1) + k, padding + m) for n, k, m in zip(S, K, out_ext))
    offsets = list(np.ndindex(*K))
    kvol = len(offsets)
    wo = np.ascontiguousarray(wd.reshape(cin, cout, kvol).transpose(2, 1, 0))  # (kvol, cout, cin)

    def place(off):
        return tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(off, S))

    crop = tuple(slice(padding, padding + m) for m in out_ext)
    out = np.empty((B, cout) + out_ext, dtype=xd.dtype)
    big = kvol * cout * int(np.prod(S)) * xd.itemsize <= _BIG_GEMM_BYTES
    for b in range(B):
        X = xd[b].reshape(cin, -1)
        full = np.zeros((cout,) + full_ext, dtype=xd.dtype)
        if big:
            Y = (wo.reshape(kvol * cout, cin) @ X).reshape((kvol, cout) + S)
        for o, off in enumerate(offsets):
            contrib = Y[o] if big else (wo[o] @ X).reshape((cout,) + S)
            full[(slice(None),) + place(off)] += contrib
        out[b] = full[(slice(None),) + crop]
    if bias is not None:
        out += bias.data.reshape((1, -1) + (1,) * r)
    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    axes = (0,) + tuple(range(2, 2 + r))

    def fn(g):
        gx = np.zeros(xd.shape, dtype=g.dtype)
        gw = np.zeros((kvol, cout, cin), dtype=g.dtype)
        for b in range(B):
            full = np.zeros((cout,) + full_ext, dtype=g.dtype)
            full[(slice(None),) + crop] = g[b]
            X = xd[b].reshape(cin, -1)
            acc = np.zeros((cin, X.shape[1]), dtype=g.dtype)
            for o, off in enumerate(offsets):
                patch = full[(slice(None),) + place(off)].reshape(cout, -1)
                acc += wo[o].T @ patch
                gw[o] += patch @ X.T
            gx[b] = acc.reshape(xd.shape[1:])
        gwk = np.ascontiguousarray(gw.transpose(2, 1, 0)).reshape(wd.shape)
        grads = (gx, gwk)
        if bias is not None:
            grads += (g.sum(axis=axes),)
        return grads

    return _make(out, "conv_transpose", inputs, fn)


def upsample_padding(kernel: int, stride: int = 2) -> tuple:
    """(padding, output_padding) making a transposed conv scale extents by ``stride``."""
    total = kernel - stride  # 2*padding - output_padding must equal this
    padding = math.ceil(total / 2)
    return padding, 2 * padding - total

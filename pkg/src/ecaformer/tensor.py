"""Dense tensors, a reverse-mode gradient tape, and the numeric kernels.

Every layer in this package is assembled from the ops below. Design points:

* Explicit tape: ops executed inside a ``with tape() as tp`` block append
  (output, inputs, backward-closure) records; ``backward(loss, tp)`` walks the
  records in reverse and accumulates gradients into ``requires_grad`` leaves.
  With no active tape, ops run plain (inference mode).
* Everything an op's backward needs is captured eagerly at forward time.
* Determinism: all reductions have a fixed order (BLAS single-threaded calls,
  sequential scatter loops, sequential kernels), so repeated runs on the same
  machine are bitwise identical.
* Per-tensor dtype: float64 for the verification suite (finite differences
  are meaningless in single precision), float32 for training and inference.
* ``finite_diff_check`` is the independent oracle: central differences vs the
  analytic gradient, with a bitwise determinism guard on the function under
  test.

Tensors produced by ops must be treated as immutable; only optimizer updates
write leaves in place, between tape lifetimes.
"""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager

import numpy as np

from . import _kernels


class DimensionError(ValueError):
    """Shape/extent mismatch; the message names the offending axis."""


class ConfigError(ValueError):
    """Invalid configuration detected at construction time."""


# Set by set_grad_fault(); when on, conv2d doubles its weight gradient so the
# gradient-check suite can prove it actually detects wrong derivatives.
_GRAD_FAULT = False


def set_grad_fault(enabled: bool) -> None:
    global _GRAD_FAULT
    _GRAD_FAULT = bool(enabled)


class Tensor:
    """N-dimensional float array plus optional gradient storage."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class OpTape:
    """Append-only, topologically ordered record of executed ops."""

    def __init__(self):
        self.nodes = []            # (out, inputs tuple, backward fn)
        self.produced = set()      # id() of every tensor produced on this tape

    def record(self, out, inputs, bwd):
        self.nodes.append((out, inputs, bwd))
        self.produced.add(id(out))


_ACTIVE = threading.local()


def _active_tape():
    return getattr(_ACTIVE, "tape", None)


@contextmanager
def tape():
    """Activate a fresh OpTape for the current thread."""
    prev = _active_tape()
    tp = OpTape()
    _ACTIVE.tape = tp
    try:
        yield tp
    finally:
        _ACTIVE.tape = prev


def _finish(out_data, inputs, bwd):
    """Wrap op output; record on the active tape when gradients may flow."""
    req = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    tp = _active_tape()
    if tp is not None and req:
        tp.record(out, tuple(t for t in inputs if isinstance(t, Tensor)), bwd)
    return out


def backward(loss: Tensor, tp: OpTape) -> None:
    """Populate .grad of every requires_grad leaf reachable from ``loss``.

    Repeated calls without zeroing accumulate. Intermediate gradients are
    freed as soon as their producing node has been processed.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if id(loss) not in tp.produced:
        raise ValueError("backward: loss was not produced through this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for out, inputs, bwd in reversed(tp.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, contrib in zip(inputs, bwd(g)):
            if contrib is None or not t.requires_grad:
                continue
            if id(t) in tp.produced:
                tid = id(t)
                if tid in grads:
                    grads[tid] += contrib
                else:
                    grads[tid] = contrib
            else:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += contrib


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def _as_operand(x, like: Tensor):
    """Python scalars become constants of the tensor's dtype."""
    if isinstance(x, Tensor):
        if x.dtype != like.dtype:
            raise TypeError(f"dtype mismatch: {like.dtype} vs {x.dtype}")
        return x, x.data
    return None, like.dtype.type(x)


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast in the forward."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b):
    bt, bd = _as_operand(b, a)
    inputs = (a, bt) if bt is not None else (a,)

    def bwd(g):
        if bt is None:
            return (_unbroadcast(g, a.shape),)
        return (_unbroadcast(g, a.shape), _unbroadcast(g, bt.shape))

    return _finish(a.data + bd, inputs, bwd)


def sub(a: Tensor, b):
    bt, bd = _as_operand(b, a)
    inputs = (a, bt) if bt is not None else (a,)

    def bwd(g):
        if bt is None:
            return (_unbroadcast(g, a.shape),)
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, bt.shape))

    return _finish(a.data - bd, inputs, bwd)


def mul(a: Tensor, b):
    bt, bd = _as_operand(b, a)
    inputs = (a, bt) if bt is not None else (a,)
    ad = a.data

    def bwd(g):
        if bt is None:
            return (_unbroadcast(g * bd, a.shape),)
        return (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, bt.shape))

    return _finish(ad * bd, inputs, bwd)


def neg(a: Tensor):
    return _finish(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor):
    mask = a.data > 0
    return _finish(a.data * mask, (a,), lambda g: (g * mask,))


def abs_t(a: Tensor):
    s = np.sign(a.data)
    return _finish(np.abs(a.data), (a,), lambda g: (g * s,))


def sqrt_t(a: Tensor):
    """Elementwise square root. Caller guarantees strictly positive input."""
    y = np.sqrt(a.data)

    def bwd(g):
        return (g / (2.0 * y),)

    return _finish(y, (a,), bwd)


def clamp(a: Tensor, lo: float, hi: float):
    """Clip to [lo, hi]; gradient passes through where lo <= x <= hi
    (boundary values included, so in-range data keeps its gradient)."""
    mask = (a.data >= lo) & (a.data <= hi)
    return _finish(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def sum_all(a: Tensor):
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return _finish(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a: Tensor, shape):
    old = a.shape
    return _finish(np.ascontiguousarray(a.data.reshape(shape)), (a,),
                   lambda g: (g.reshape(old),))


def permute(a: Tensor, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _finish(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def pad2d(a: Tensor, top: int, bottom: int, left: int, right: int):
    """Zero padding on the trailing two (spatial) axes."""
    if min(top, bottom, left, right) < 0:
        raise ValueError("pad2d: negative padding")
    widths = [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)]
    H, W = a.shape[-2], a.shape[-1]

    def bwd(g):
        sl = (Ellipsis, slice(top, top + H), slice(left, left + W))
        return (np.ascontiguousarray(g[sl]),)

    return _finish(np.pad(a.data, widths), (a,), bwd)


def crop2d(a: Tensor, top: int, left: int, height: int, width: int):
    """Slice a height x width window from the trailing two axes."""
    if top + height > a.shape[-2] or left + width > a.shape[-1]:
        raise DimensionError(
            f"crop2d: window {height}x{width}+{top}+{left} exceeds input "
            f"{a.shape[-2]}x{a.shape[-1]} (spatial axes)")
    sl = (Ellipsis, slice(top, top + height), slice(left, left + width))
    shape = a.shape

    def bwd(g):
        dx = np.zeros(shape, g.dtype)
        dx[sl] = g
        return (dx,)

    return _finish(np.ascontiguousarray(a.data[sl]), (a,), bwd)


def upsample_nearest2x(a: Tensor):
    """Duplicate each spatial position into a 2x2 block."""
    out = a.data.repeat(2, axis=-2).repeat(2, axis=-1)
    lead = a.shape[:-2]
    H, W = a.shape[-2], a.shape[-1]

    def bwd(g):
        g = g.reshape(lead + (H, 2, W, 2))
        return (g.sum(axis=(-3, -1)),)

    return _finish(out, (a,), bwd)


def concat_channels(a: Tensor, c: Tensor):
    """Concatenate along the channel axis (axis 1 of B,C,H,W)."""
    if a.shape[0] != c.shape[0]:
        raise DimensionError(f"concat_channels: batch extents differ (axis 0): {a.shape[0]} vs {c.shape[0]}")
    if a.shape[2:] != c.shape[2:]:
        raise DimensionError(f"concat_channels: spatial extents differ (axes 2,3): {a.shape[2:]} vs {c.shape[2:]}")
    c1 = a.shape[1]

    def bwd(g):
        return (np.ascontiguousarray(g[:, :c1]), np.ascontiguousarray(g[:, c1:]))

    return _finish(np.concatenate([a.data, c.data], axis=1), (a, c), bwd)


def slice_channels(a: Tensor, c0: int, c1: int):
    shape = a.shape

    def bwd(g):
        dx = np.zeros(shape, g.dtype)
        dx[:, c0:c1] = g
        return (dx,)

    return _finish(np.ascontiguousarray(a.data[:, c0:c1]), (a,), bwd)


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------

def matmul_batched(a: Tensor, bm: Tensor):
    """Batched matrix product over the trailing two axes.

    Leading batch extents must match exactly (no broadcasting); the
    contraction order over k is the backend's fixed sequential order, so
    results are reproducible bit for bit.
    """
    if a.dtype != bm.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {bm.dtype}")
    if a.shape[:-2] != bm.shape[:-2]:
        raise DimensionError(
            f"matmul_batched: leading extents differ: {a.shape[:-2]} vs {bm.shape[:-2]}")
    if a.shape[-1] != bm.shape[-2]:
        raise DimensionError(
            f"matmul_batched: inner extents differ (a axis {a.ndim - 1} = {a.shape[-1]}, "
            f"b axis {bm.ndim - 2} = {bm.shape[-2]})")
    ad, bd = a.data, bm.data

    def bwd(g):
        da = np.matmul(g, np.swapaxes(bd, -1, -2))
        db = np.matmul(np.swapaxes(ad, -1, -2), g)
        return (da, db)

    return _finish(np.matmul(ad, bd), (a, bm), bwd)


def softmax_lastdim(x: Tensor):
    """Row-stochastic softmax over the last axis, max-subtracted for safety."""
    if not np.isfinite(x.data).all():
        raise ValueError("softmax_lastdim: non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _finish(y, (x,), bwd)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _conv_out_extent(H, pad, kh, stride, axis_name):
    num = H + 2 * pad - kh
    if num < 0:
        raise DimensionError(f"conv2d: kernel {kh} exceeds padded input {H + 2 * pad} on axis {axis_name}")
    if num % stride != 0:
        raise DimensionError(
            f"conv2d: axis {axis_name}: (extent {H} + 2*pad {pad} - kernel {kh}) "
            f"= {num} is not divisible by stride {stride}")
    return num // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0):
    """Cross-correlation with zero padding (no kernel flip).

    x: (B, Cin, H, W); w: (Cout, Cin, kh, kw); b: (Cout,).
    stride must be 1 or 2; stride 2 requires the output extent to divide
    exactly. Lowered to im2col + one batched GEMM; the backward scatters
    column gradients back with a fixed kernel-offset loop order.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input/weight, got {x.ndim}-d and {w.ndim}-d")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if pad < 0:
        raise ValueError("conv2d: negative padding")
    B, Cin, H, W = x.shape
    Cout, wCin, kh, kw = w.shape
    if wCin != Cin:
        raise DimensionError(f"conv2d: input channels {Cin} != weight channels {wCin} (axis 1)")
    if b.shape != (Cout,):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({Cout},) (axis 0)")
    Ho = _conv_out_extent(H, pad, kh, stride, "H")
    Wo = _conv_out_extent(W, pad, kw, stride, "W")
    xd, wd, bd = x.data, w.data, b.data

    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        # 1x1 projection: plain channel-mixing GEMM, no column matrix.
        cols = xd.reshape(B, Cin, H * W)
        w2 = wd.reshape(Cout, Cin)
        out = np.matmul(w2, cols) + bd[:, None]

        def bwd(g):
            g2 = g.reshape(B, Cout, H * W)
            dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            if _GRAD_FAULT:
                dw = dw * 2.0
            db = g2.sum(axis=(0, 2))
            dx = np.matmul(w2.T, g2).reshape(x.shape)
            return (dx, dw, db)

        return _finish(out.reshape(B, Cout, Ho, Wo), (x, w, b), bwd)

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = np.empty((B, Cin, kh * kw, Ho * Wo), xd.dtype)
    for ki in range(kh):
        for kj in range(kw):
            patch = xp[:, :, ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride]
            cols[:, :, ki * kw + kj, :] = patch.reshape(B, Cin, Ho * Wo)
    cols = cols.reshape(B, Cin * kh * kw, Ho * Wo)
    w2 = wd.reshape(Cout, Cin * kh * kw)
    out = (np.matmul(w2, cols) + bd[:, None]).reshape(B, Cout, Ho, Wo)
    Hp, Wp = xp.shape[2], xp.shape[3]

    def bwd(g):
        g2 = g.reshape(B, Cout, Ho * Wo)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if _GRAD_FAULT:
            dw = dw * 2.0
        db = g2.sum(axis=(0, 2))
        dcols = np.matmul(w2.T, g2).reshape(B, Cin, kh * kw, Ho * Wo)
        dxp = np.zeros((B, Cin, Hp, Wp), g.dtype)
        for ki in range(kh):
            for kj in range(kw):
                dxp[:, :, ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride] += \
                    dcols[:, :, ki * kw + kj, :].reshape(B, Cin, Ho, Wo)
        dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
        return (np.ascontiguousarray(dx), dw, db)

    return _finish(out, (x, w, b), bwd)


def depthwise_conv3x3(x: Tensor, w: Tensor):
    """Per-channel 3x3 cross-correlation, stride 1, zero pad 1, no bias.

    w: (C, 1, 3, 3). Forward/backward are nine shifted fused multiply-adds,
    accumulated in a fixed offset order.
    """
    B, C, H, W = x.shape
    if w.shape != (C, 1, 3, 3):
        raise DimensionError(f"depthwise_conv3x3: weight shape {w.shape} != ({C}, 1, 3, 3) (axis 0)")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    wd = w.data
    out = np.zeros_like(x.data)
    for ki in range(3):
        for kj in range(3):
            out += wd[:, 0, ki, kj][None, :, None, None] * xp[:, :, ki:ki + H, kj:kj + W]

    def bwd(g):
        dxp = np.zeros_like(xp)
        dw = np.empty_like(wd)
        for ki in range(3):
            for kj in range(3):
                dxp[:, :, ki:ki + H, kj:kj + W] += wd[:, 0, ki, kj][None, :, None, None] * g
                dw[:, 0, ki, kj] = (g * xp[:, :, ki:ki + H, kj:kj + W]).sum(axis=(0, 2, 3))
        return (np.ascontiguousarray(dxp[:, :, 1:1 + H, 1:1 + W]), dw)

    return _finish(out, (x, w), bwd)


def depthwise_separable_conv(x: Tensor, dw: Tensor, pw: Tensor, b: Tensor):
    """Depthwise 3x3 (stride 1, pad 1) followed by a pointwise 1x1 with bias.

    Equivalent to grouped conv2d then 1x1 conv2d; spatial size is preserved.
    """
    if dw.shape[0] != x.shape[1]:
        raise DimensionError(
            f"depthwise_separable_conv: depthwise channels {dw.shape[0]} != input channels {x.shape[1]} (axis 1)")
    mid = depthwise_conv3x3(x, dw)
    return conv2d(mid, pw, b, stride=1, pad=0)


def resample_down(x: Tensor, w: Tensor, b: Tensor):
    """Halve spatial extent, double channels: stride-2 4x4 conv, pad 1."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(
            f"resample_down: spatial extents must be even, got {H}x{W}; pad the input to a multiple of 4")
    if w.shape != (2 * C, C, 4, 4):
        raise DimensionError(f"resample_down: weight shape {w.shape} != ({2 * C}, {C}, 4, 4)")
    return conv2d(x, w, b, stride=2, pad=1)


def resample_up(x: Tensor, w: Tensor, b: Tensor):
    """Double spatial extent, halve channels: nearest 2x then 1x1 conv."""
    C = x.shape[1]
    if C % 2:
        raise DimensionError(f"resample_up: channel count {C} must be even (axis 1)")
    if w.shape != (C // 2, C, 1, 1):
        raise DimensionError(f"resample_up: weight shape {w.shape} != ({C // 2}, {C}, 1, 1)")
    return conv2d(upsample_nearest2x(x), w, b, stride=1, pad=0)


# ---------------------------------------------------------------------------
# fused attention
# ---------------------------------------------------------------------------

def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, scale: Tensor):
    """out[b,h] = softmax(q[b,h] * scale[h] @ k[b,h]^T) @ v[b,h].

    q, k, v: (B, H, T, d) in matching layout; scale: (H,), one learnable
    scalar per head. Streaming kernels keep memory at O(T) per head; the
    backward reconstructs probabilities from the saved row max/sum.
    """
    for name, t in (("q", q), ("k", k), ("v", v)):
        if t.ndim != 4:
            raise DimensionError(f"scaled_dot_attention: {name} must be 4-d (B,H,T,d), got {t.ndim}-d")
    if q.dtype != k.dtype or q.dtype != v.dtype or q.dtype != scale.dtype:
        raise TypeError("scaled_dot_attention: mixed dtypes")
    if k.shape != v.shape:
        raise DimensionError(f"scaled_dot_attention: k shape {k.shape} != v shape {v.shape}")
    if q.shape[:2] != k.shape[:2] or q.shape[3] != k.shape[3]:
        raise DimensionError(f"scaled_dot_attention: q {q.shape} incompatible with k {k.shape}")
    if scale.shape != (q.shape[1],):
        raise DimensionError(f"scaled_dot_attention: scale shape {scale.shape} != ({q.shape[1]},) (head axis)")
    qd = np.ascontiguousarray(q.data)
    kd = np.ascontiguousarray(k.data)
    vd = np.ascontiguousarray(v.data)
    sd = np.ascontiguousarray(scale.data)
    out, S, M = _kernels.attention_forward(qd, kd, vd, sd)

    def bwd(g):
        dq, dk, dv, dscale = _kernels.attention_backward(
            qd, kd, vd, sd, M, S, np.ascontiguousarray(g))
        return (dq, dk, dv, dscale)

    return _finish(out, (q, k, v, scale), bwd)


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------

def finite_diff_check(f, x: Tensor, h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    f maps a Tensor to a scalar Tensor and must be deterministic: it is
    evaluated twice at x and the two results must agree bitwise, otherwise a
    ValueError is raised. x must be float64 and h in [1e-5, 1e-3]; central
    differences in single precision would be noise.
    """
    if x.dtype != np.float64:
        raise TypeError(f"finite_diff_check requires float64 input, got {x.dtype}")
    if not (1e-5 <= h <= 1e-3):
        raise ValueError(f"finite_diff_check: h={h} outside [1e-5, 1e-3]")

    y0 = f(Tensor(x.data.copy())).item()
    y1 = f(Tensor(x.data.copy())).item()
    if y0 != y1:
        raise ValueError("finite_diff_check: f is not deterministic (two evaluations differ)")

    probe = Tensor(x.data.copy(), requires_grad=True)
    with tape() as tp:
        loss = f(probe)
        backward(loss, tp)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    numeric = np.empty_like(flat)
    work = flat.copy()
    for i in range(flat.size):
        orig = work[i]
        work[i] = orig + h
        fp = f(Tensor(work.reshape(x.shape))).item()
        work[i] = orig - h
        fm = f(Tensor(work.reshape(x.shape))).item()
        work[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
    an = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(an), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(an - numeric) / denom))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_MAGIC = b"ECAT"
_VERSION = 1


def save_tensor(arr, fileobj) -> None:
    """Write one tensor record: magic, u32 version, u32 rank, u32 extents,
    then the payload as little-endian float32, row-major."""
    data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    data = np.ascontiguousarray(data, dtype="<f4")
    fileobj.write(_MAGIC)
    fileobj.write(struct.pack("<II", _VERSION, data.ndim))
    fileobj.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fileobj.write(data.tobytes())


def load_tensor(fileobj) -> np.ndarray:
    """Read one tensor record written by save_tensor. Returns float32."""
    magic = fileobj.read(4)
    if magic != _MAGIC:
        raise ValueError(f"tensor record: bad magic {magic!r}, expected {_MAGIC!r}")
    head = fileobj.read(8)
    if len(head) != 8:
        raise IOError("tensor record: truncated header")
    version, rank = struct.unpack("<II", head)
    if version != _VERSION:
        raise ValueError(f"tensor record: unsupported version {version}")
    if rank > 8:
        raise ValueError(f"tensor record: implausible rank {rank}")
    ext = fileobj.read(4 * rank)
    if len(ext) != 4 * rank:
        raise IOError("tensor record: truncated extents")
    shape = struct.unpack(f"<{rank}I", ext)
    count = int(np.prod(shape)) if rank else 1
    payload = fileobj.read(4 * count)
    if len(payload) != 4 * count:
        raise IOError(f"tensor record: truncated payload ({len(payload)} of {4 * count} bytes)")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()

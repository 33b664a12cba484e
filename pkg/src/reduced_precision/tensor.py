"""Dense float32 kernels with an arithmetic context that can quantize every
elementary add and multiply.

Tensors are plain ``numpy.float32`` arrays in C order. Every kernel checks
shapes before computing. Under per-operation granularity the kernels switch
to a fixed left-to-right running sum so the sequence of rounded operations
is well defined; otherwise they use numpy/BLAS directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from reduced_precision.quant import (
    Granularity,
    PrecisionConfig,
    make_rng,
    quantize,
)

F32 = np.float32


class ShapeError(ValueError):
    pass


@dataclass
class ArithContext:
    """Precision settings plus the rng that stochastic rounding draws from.

    ``ordered`` forces the sequential accumulation path even without
    per-operation rounding, which makes results comparable bit for bit.
    """

    cfg: PrecisionConfig = field(default_factory=lambda: PrecisionConfig(granularity=Granularity.NONE))
    rng: np.random.Generator = field(default_factory=lambda: make_rng(0))
    ordered: bool = False

    @property
    def per_op(self) -> bool:
        return self.cfg.granularity is Granularity.PER_OPERATION

    @property
    def per_layer(self) -> bool:
        return self.cfg.granularity is Granularity.PER_LAYER

    @property
    def sequential(self) -> bool:
        return self.ordered or self.per_op

    def q(self, x):
        """Round an elementary-operation result (per-operation mode only)."""
        if self.per_op and self.cfg.mantissa_bits < 23:
            return quantize(x, self.cfg, self.rng)
        return x

    def q_layer(self, x):
        """Round a layer output (per-layer mode only)."""
        if self.per_layer and self.cfg.mantissa_bits < 23:
            return quantize(x, self.cfg, self.rng)
        return x

    def q_params(self, x):
        """Round stored parameters; active for every granularity except none."""
        if self.cfg.is_identity:
            return x
        return quantize(x, self.cfg, self.rng)

    # elementwise arithmetic, each result rounded under per-operation mode
    def add(self, a, b):
        return self.q(np.add(a, b, dtype=F32))

    def sub(self, a, b):
        return self.q(np.subtract(a, b, dtype=F32))

    def mul(self, a, b):
        return self.q(np.multiply(a, b, dtype=F32))

    def div(self, a, b):
        return self.q(np.divide(a, b, dtype=F32))

    def exp(self, a):
        return self.q(np.exp(a, dtype=F32))

    def sqrt(self, a):
        return self.q(np.sqrt(a, dtype=F32))


FULL = ArithContext()


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def _seq_sum(terms, ctx: ArithContext):
    """Running sum over the leading axis of ``terms``, left to right."""
    acc = terms[0]
    for t in terms[1:]:
        acc = ctx.add(acc, t)
    return acc


def matmul(a, b, ctx: ArithContext = FULL):
    a = np.asarray(a, dtype=F32)
    b = np.asarray(b, dtype=F32)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.shape[1] == 0:
        return np.zeros((a.shape[0], b.shape[1]), dtype=F32)
    if not ctx.sequential:
        return np.matmul(a, b)
    acc = ctx.mul(a[:, 0:1], b[0:1, :])
    for k in range(1, a.shape[1]):
        acc = ctx.add(acc, ctx.mul(a[:, k : k + 1], b[k : k + 1, :]))
    return np.ascontiguousarray(acc, dtype=F32)


def sum_axis0(t, ctx: ArithContext = FULL):
    t = np.asarray(t, dtype=F32)
    if not ctx.sequential:
        return t.sum(axis=0, dtype=F32)
    return np.asarray(_seq_sum(t, ctx), dtype=F32)


def im2col(x, m: int, n: int):
    """(B, C, H, W) -> (B * H' * W', C * m * n) patch matrix, (c, i, j) row-major."""
    b, c, h, w = x.shape
    win = sliding_window_view(x, (m, n), axis=(2, 3))  # B, C, H', W', m, n
    ho, wo = h - m + 1, w - n + 1
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * m * n)


def col2im(cols, x_shape, m: int, n: int, ctx: ArithContext = FULL):
    """Adjoint of :func:`im2col`; overlapping contributions summed in (i, j) order."""
    b, c, h, w = x_shape
    ho, wo = h - m + 1, w - n + 1
    patches = cols.reshape(b, ho, wo, c, m, n).transpose(0, 3, 4, 5, 1, 2)  # B, C, m, n, H', W'
    out = np.zeros(x_shape, dtype=F32)
    for i in range(m):
        for j in range(n):
            region = out[:, :, i : i + ho, j : j + wo]
            out[:, :, i : i + ho, j : j + wo] = ctx.add(region, patches[:, :, i, j])
    return out


def conv2d_valid(x, kernel, ctx: ArithContext = FULL):
    """Valid cross-correlation ``S(i, j) = sum_m sum_n I(i+m, j+n) W(m, n)``.

    Accepts a single 2-D plane with a 2-D kernel, or a batch ``(B, C, H, W)``
    with filters ``(F, C, M, N)``; channels are summed, giving ``(B, F, H', W')``.
    """
    x = np.asarray(x, dtype=F32)
    kernel = np.asarray(kernel, dtype=F32)
    if x.ndim == 2 and kernel.ndim == 2:
        return conv2d_valid(x[None, None], kernel[None, None], ctx)[0, 0]
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d_valid: expected (B,C,H,W) and (F,C,M,N), got {x.shape} and {kernel.shape}")
    _, c, h, w = x.shape
    f, kc, m, n = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d_valid: input has {c} channels, kernel expects {kc}")
    if m > h or n > w:
        raise ShapeError(f"conv2d_valid: kernel {m}x{n} larger than input {h}x{w}")
    cols = im2col(x, m, n)
    out = matmul(cols, kernel.reshape(f, -1).T, ctx)
    return out.reshape(x.shape[0], h - m + 1, w - n + 1, f).transpose(0, 3, 1, 2).copy()


def conv2d_backward(x, kernel, dout, ctx: ArithContext = FULL, need_dx: bool = True):
    """Gradients of :func:`conv2d_valid` w.r.t. input and kernel (batched form).

    ``dx`` is ``None`` when ``need_dx`` is false (first layer).
    """
    f, c, m, n = kernel.shape
    if dout.shape[1] != f or x.shape[1] != c:
        raise ShapeError(f"conv2d_backward: dout {dout.shape} incompatible with kernel {kernel.shape}")
    cols = im2col(x, m, n)
    dmat = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, f)
    dkernel = matmul(dmat.T, cols, ctx).reshape(kernel.shape)
    if not need_dx:
        return None, dkernel
    dcols = matmul(dmat, kernel.reshape(f, -1), ctx)
    dx = col2im(dcols, x.shape, m, n, ctx)
    return dx, dkernel


def maxpool2(x):
    """2x2 non-overlapping max pool on the last two axes; odd trailing rows/cols dropped.

    Returns the pooled tensor and the in-window argmax (row-major, first max
    wins) needed by :func:`maxpool2_backward`.
    """
    x = np.asarray(x, dtype=F32)
    if x.ndim < 2 or x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ShapeError(f"maxpool2: need at least 2x2 spatial dims, got {x.shape}")
    h, w = x.shape[-2] // 2, x.shape[-1] // 2
    lead = x.shape[:-2]
    win = x[..., : 2 * h, : 2 * w].reshape(*lead, h, 2, w, 2)
    win = np.moveaxis(win, -3, -2).reshape(*lead, h, w, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2_backward(dout, idx, in_shape):
    lead = dout.shape[:-2]
    h, w = dout.shape[-2:]
    win = np.zeros((*lead, h, w, 4), dtype=F32)
    np.put_along_axis(win, idx[..., None], dout[..., None], axis=-1)
    win = np.moveaxis(win.reshape(*lead, h, w, 2, 2), -2, -3).reshape(*lead, 2 * h, 2 * w)
    dx = np.zeros(in_shape, dtype=F32)
    dx[..., : 2 * h, : 2 * w] = win
    return dx


def relu(t, ctx: ArithContext = FULL):
    return np.maximum(np.asarray(t, dtype=F32), F32(0))


def relu_backward(dout, z):
    _check_same(np.asarray(dout), np.asarray(z), "relu_backward")
    return np.where(z > 0, dout, F32(0)).astype(F32)


def add_bias(t, bias, ctx: ArithContext = FULL):
    """Add ``bias`` along axis 1 (features of a matrix, channels of a 4-D map)."""
    t = np.asarray(t, dtype=F32)
    bias = np.asarray(bias, dtype=F32)
    if t.ndim < 2 or bias.shape != (t.shape[1],):
        raise ShapeError(f"add_bias: bias {bias.shape} does not match axis 1 of {t.shape}")
    return ctx.add(t, bias.reshape((-1,) + (1,) * (t.ndim - 2)))


def softmax_rows(t, ctx: ArithContext = FULL):
    t = np.asarray(t, dtype=F32)
    if t.ndim != 2:
        raise ShapeError(f"softmax_rows: expected a matrix, got {t.shape}")
    shifted = ctx.sub(t, t.max(axis=1, keepdims=True))
    e = ctx.exp(shifted)
    if ctx.sequential:
        total = _seq_sum(e.T, ctx)[:, None]
    else:
        total = e.sum(axis=1, keepdims=True, dtype=F32)
    return ctx.div(e, total)


def scale(t, s, ctx: ArithContext = FULL):
    return ctx.mul(np.asarray(t, dtype=F32), F32(s))


def hadamard(a, b, ctx: ArithContext = FULL):
    a, b = np.asarray(a, dtype=F32), np.asarray(b, dtype=F32)
    _check_same(a, b, "hadamard")
    return ctx.mul(a, b)


def sub(a, b, ctx: ArithContext = FULL):
    a, b = np.asarray(a, dtype=F32), np.asarray(b, dtype=F32)
    _check_same(a, b, "sub")
    return ctx.sub(a, b)

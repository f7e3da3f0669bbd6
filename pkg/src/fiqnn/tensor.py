"""Dense tensor containers and the arithmetic kernels everything else builds on.

Real-valued kernels accumulate left-to-right over the contraction axis, so a
result is bit-identical to the scalar reference loop and to any rerun of
itself. The jitted kernels keep that order: per output element there is a
single add chain, no reassociation and no FMA contraction, which the oracle
tests in the suite verify term for term. Integer kernels run in 64-bit
accumulators; a static bound is checked before any work starts, so overflow
is detected rather than silently wrapped.

Layout is fixed: activations are NCHW, convolution kernels are OIHW, both
row-major. Convolution is cross-correlation (no kernel flip) with zero
padding, summing input channel, then kernel row, then kernel column.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import AccumulatorOverflowError, DimensionError, NumericError, RangeError

# Maximum |value| a 64-bit signed accumulator may reach in our kernels.
ACC_LIMIT = 2**62

Tensor = np.ndarray


@dataclass
class IntTensor:
    """Integer tensor with bit-width metadata.

    kind selects the validation rule:
      * ``code``   -- unsigned activation codes in [0, 2^bits - 1]
      * ``weight`` -- centered signed weight codes in [-(2^bits - 1), 2^bits - 1]
      * ``acc``    -- wide accumulators, exempt from the bit-width range
    """

    data: np.ndarray
    bits: int
    kind: str = "code"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int64)
        if self.bits < 1:
            raise RangeError(f"bit-width must be >= 1, got {self.bits}")
        if self.kind not in ("code", "weight", "acc"):
            raise RangeError(f"unknown IntTensor kind {self.kind!r}")
        self.validate()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def validate(self) -> None:
        if self.kind == "code":
            hi = (1 << self.bits) - 1
            if self.data.size and (self.data.min() < 0 or self.data.max() > hi):
                raise RangeError(
                    f"code values outside [0, {hi}] for {self.bits}-bit tensor"
                )
        elif self.kind == "weight":
            hi = (1 << self.bits) - 1
            if self.data.size and (self.data.min() < -hi or self.data.max() > hi):
                raise RangeError(
                    f"weight codes outside [-{hi}, {hi}] for {self.bits}-bit tensor"
                )
        # accumulators are exempt by declaration


def as_real(x, shape=None) -> np.ndarray:
    """Coerce to a float64 array, rejecting non-finite values."""
    a = np.asarray(x, dtype=np.float64)
    if shape is not None and a.shape != tuple(shape):
        raise DimensionError(f"expected shape {tuple(shape)}, got {a.shape}")
    if a.size and not np.isfinite(a).all():
        raise NumericError("non-finite value in tensor")
    return a


def _check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if a.size and not np.isfinite(a).all():
        raise NumericError(f"non-finite value produced by {what}")
    return a


@numba.njit(cache=True)
def _matmul_kernel(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        orow = out[i]
        for kk in range(k):
            aik = a[i, kk]
            brow = b[kk]
            for j in range(n):
                orow[j] = orow[j] + aik * brow[j]
    return out


@numba.njit(cache=True)
def _conv2d_kernel(xp, kern, stride, oh, ow):
    n = xp.shape[0]
    co, ci, kh, kw = kern.shape
    out = np.zeros((n, co, oh, ow), dtype=np.float64)
    for nn in range(n):
        for o in range(co):
            for i in range(oh):
                orow = out[nn, o, i]
                for c in range(ci):
                    for a in range(kh):
                        xrow = xp[nn, c, i * stride + a]
                        for b in range(kw):
                            w = kern[o, c, a, b]
                            for j in range(ow):
                                orow[j] = orow[j] + xrow[j * stride + b] * w
    return out


def matmul(a, b) -> np.ndarray:
    """Matrix product with fixed left-to-right summation over the inner axis."""
    a = as_real(a)
    b = as_real(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    out = _matmul_kernel(np.ascontiguousarray(a), np.ascontiguousarray(b))
    return _check_finite(out, "matmul")


def _conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv_shapes(x_shape, k_shape, stride, padding):
    if len(x_shape) != 4 or len(k_shape) != 4:
        raise DimensionError("conv2d expects NCHW input and OIHW kernel")
    n, c, h, w = x_shape
    co, ci, kh, kw = k_shape
    if ci != c:
        raise DimensionError(f"channel mismatch: input has {c}, kernel expects {ci}")
    if stride < 1:
        raise DimensionError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise DimensionError(f"padding must be non-negative, got {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(w, kw, stride, padding)
    return n, c, h, w, co, kh, kw, oh, ow


def pad_nchw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding : padding + h, padding : padding + w] = x
    return xp


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> np.ndarray:
    """2-D cross-correlation over NCHW input with an OIHW kernel.

    Summation over a patch runs input-channel, kernel-row, kernel-column,
    left to right, so the result matches the naive nested loop bit for bit.
    """
    x = as_real(x)
    kernel = as_real(kernel)
    n, c, h, w, co, kh, kw, oh, ow = _check_conv_shapes(
        x.shape, kernel.shape, stride, padding
    )
    xp = np.ascontiguousarray(pad_nchw(x, padding))
    out = _conv2d_kernel(xp, np.ascontiguousarray(kernel), stride, oh, ow)
    return _check_finite(out, "conv2d")


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Patch matrix of shape (N*OH*OW, C*KH*KW), patch axis ordered (c, kh, kw)."""
    n, c = x.shape[0], x.shape[1]
    xp = pad_nchw(x, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (N, C, OH, OW, KH, KW) -> (N, OH, OW, C, KH, KW)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    oh, ow = win.shape[2], win.shape[3]
    return cols.reshape(n * oh * ow, c * kh * kw)


def _int_bound_check(max_abs_product_sum: int, what: str, layer: int | None = None):
    if max_abs_product_sum >= ACC_LIMIT:
        raise AccumulatorOverflowError(
            f"{what}: worst-case accumulator {max_abs_product_sum} exceeds "
            f"the 64-bit budget {ACC_LIMIT}",
            layer=layer,
        )


def _max_abs(a: np.ndarray) -> int:
    return int(np.abs(a).max()) if a.size else 0


def int_matmul(a: IntTensor, b: IntTensor, layer: int | None = None) -> IntTensor:
    """Exact integer matrix product in 64-bit accumulators."""
    out = int_matmul_raw(a.data, b.data, layer=layer)
    return IntTensor(out, bits=64, kind="acc")


def int_matmul_raw(a: np.ndarray, b: np.ndarray, layer: int | None = None) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"int_matmul shape mismatch: {a.shape} x {b.shape}")
    _int_bound_check(a.shape[1] * _max_abs(a) * _max_abs(b), "int_matmul", layer)
    return a @ b


def int_conv2d(
    x: IntTensor, kernel: IntTensor, stride: int = 1, padding: int = 0,
    layer: int | None = None,
) -> IntTensor:
    """Exact integer cross-correlation in 64-bit accumulators."""
    out = int_conv2d_raw(x.data, kernel.data, stride, padding, layer=layer)
    return IntTensor(out, bits=64, kind="acc")


def int_conv2d_raw(
    x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0,
    layer: int | None = None,
) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    kernel = np.asarray(kernel, dtype=np.int64)
    n, c, h, w, co, kh, kw, oh, ow = _check_conv_shapes(
        x.shape, kernel.shape, stride, padding
    )
    _int_bound_check(c * kh * kw * _max_abs(x) * _max_abs(kernel), "int_conv2d", layer)
    cols = im2col(x, kh, kw, stride, padding)
    out = cols @ kernel.reshape(co, c * kh * kw).T
    return np.ascontiguousarray(out.reshape(n, oh, ow, co).transpose(0, 3, 1, 2))


def maxpool2d(x: np.ndarray, size: int):
    """Non-overlapping max pooling. Returns (pooled, argmax) with argmax flat
    window indices in row-major scan order; the first maximum wins a tie."""
    if x.ndim != 4:
        raise DimensionError("maxpool2d expects NCHW input")
    n, c, h, w = x.shape
    if size < 1 or h < size or w < size:
        raise DimensionError(f"pool size {size} invalid for spatial dims {h}x{w}")
    oh, ow = h // size, w // size
    win = x[:, :, : oh * size, : ow * size]
    win = win.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5)
    win = np.ascontiguousarray(win).reshape(n, c, oh, ow, size * size)
    idx = win.argmax(axis=-1)
    pooled = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(pooled), idx


def maxpool2d_backward(grad: np.ndarray, idx: np.ndarray, in_shape, size: int):
    """Route pooled gradients back to the winning positions."""
    n, c, h, w = in_shape
    oh, ow = grad.shape[2], grad.shape[3]
    out = np.zeros((n, c, oh, ow, size * size), dtype=np.float64)
    np.put_along_axis(out, idx[..., None], grad[..., None], axis=-1)
    out = out.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5)
    full = np.zeros(in_shape, dtype=np.float64)
    full[:, :, : oh * size, : ow * size] = out.reshape(n, c, oh * size, ow * size)
    return full


@dataclass
class FloatTrap:
    """Counts kernel invocations by dtype class; used by the no-float audit."""

    int_ops: int = 0
    float_ops: int = 0
    float_sites: list = field(default_factory=list)

    def observe(self, site: str, *arrays) -> None:
        floats = [a for a in arrays if np.asarray(a).dtype.kind == "f"]
        if floats:
            self.float_ops += 1
            self.float_sites.append(site)
        else:
            self.int_ops += 1

"""Uniform quantization primitives and their straight-through backward rules.

An m-bit code grid has 2^m - 1 steps. Activations live in [0, 1] and map to
codes via round((2^m - 1) * r); weights live in [-1, 1] and reuse the same
code space through the affine map (w + 1) / 2. Rounding breaks ties half away
from zero, fixed globally so every path is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RangeError
from .tensor import IntTensor

MAX_BITS = 8


def round_half_away(x):
    """Nearest integer with .5 ties away from zero (numpy.round is half-even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def levels(bits: int) -> int:
    """Number of grid steps for a bit-width: 2^bits - 1."""
    if bits < 1:
        raise ConfigError(f"bit-width must be >= 1, got {bits}")
    return (1 << bits) - 1


def quantize_code(r, bits: int):
    """Map real values in [0, 1] to integer codes in [0, 2^bits - 1].

    The caller is responsible for clamping to [0, 1] first (the clip layer
    does this in the network paths)."""
    q = levels(bits)
    codes = round_half_away(np.multiply(r, q, dtype=np.float64)).astype(np.int64)
    return codes if isinstance(r, np.ndarray) else int(codes)


def _check_code_range(code, bits: int) -> np.ndarray:
    c = np.asarray(code, dtype=np.int64)
    q = levels(bits)
    if c.size and (c.min() < 0 or c.max() > q):
        raise RangeError(f"code outside [0, {q}] for {bits}-bit grid")
    return c


def rescale_activation(code, bits: int):
    """Code to activation value: code / (2^bits - 1), in [0, 1]."""
    c = _check_code_range(code, bits)
    out = c / float(levels(bits))
    return out if isinstance(code, np.ndarray) else float(out)


def rescale_weight(code, bits: int):
    """Code to weight value: 2 * code / (2^bits - 1) - 1, in [-1, 1]."""
    c = _check_code_range(code, bits)
    out = 2.0 * c / float(levels(bits)) - 1.0
    return out if isinstance(code, np.ndarray) else float(out)


def scaled_rescale(code, bits: int, alpha: int):
    """Code to scaled activation value: alpha * code / (2^bits - 1).

    Reference semantics for the per-layer scale factor; the integer runtime
    realizes the same ratio with an integer multiply and a rounding shift."""
    if int(alpha) < 1:
        raise ConfigError(f"scale factor must be >= 1, got {alpha}")
    out = int(alpha) * rescale_activation(code, bits)
    return out if isinstance(code, np.ndarray) else float(out)


def quantize_dequantize(r: np.ndarray, bits: int) -> np.ndarray:
    """Snap values already in [0, 1] onto the bits-wide activation grid."""
    return quantize_code(np.asarray(r, dtype=np.float64), bits) / float(levels(bits))


def quantize_weight_tensor(w, bits: int):
    """Quantize a raw weight tensor onto the signed uniform grid.

    Values are hard-clamped to [-1, 1], pushed through the code map, and
    returned both as codes and as their dequantized grid values."""
    w = np.asarray(w, dtype=np.float64)
    clamped = np.clip(w, -1.0, 1.0)
    codes = quantize_code((clamped + 1.0) / 2.0, bits)
    dequant = rescale_weight(codes, bits)
    return IntTensor(codes, bits=bits, kind="code"), dequant


def ste_backward(upstream_grad: np.ndarray, pre_quant_input: np.ndarray, domain: str):
    """Straight-through gradient: pass where the pre-quantization input lies
    strictly inside the quantizer domain, zero elsewhere."""
    g = np.asarray(upstream_grad, dtype=np.float64)
    x = np.asarray(pre_quant_input, dtype=np.float64)
    if g.shape != x.shape:
        raise RangeError(f"shape mismatch {g.shape} vs {x.shape}")
    if domain == "weight":
        mask = (x > -1.0) & (x < 1.0)
    elif domain == "activation":
        mask = (x > 0.0) & (x < 1.0)
    else:
        raise ConfigError(f"unknown STE domain {domain!r}")
    return g * mask


@dataclass
class ScaleFactor:
    """Positive integer scale substituting for batch normalization."""

    alpha: int

    def __post_init__(self):
        self.alpha = int(self.alpha)
        if self.alpha < 1:
            raise ConfigError(f"scale factor must be >= 1, got {self.alpha}")

    def __int__(self) -> int:
        return self.alpha


@dataclass
class QuantConfig:
    """Bit-widths for weights and activations, with optional per-block overrides.

    Overrides map a block index (one conv/dense distillation unit) to a
    (weight_bits, activation_bits) pair. exempt_edge_layers keeps the first
    and last conv/dense layers in full precision for comparison experiments;
    such networks cannot be exported to the integer runtime."""

    weight_bits: int = 4
    activation_bits: int = 4
    overrides: dict[int, tuple[int, int]] = field(default_factory=dict)
    exempt_edge_layers: bool = False

    def __post_init__(self):
        for name, bits in (
            ("weight_bits", self.weight_bits),
            ("activation_bits", self.activation_bits),
        ):
            if not 1 <= bits <= MAX_BITS:
                raise ConfigError(f"{name} must be in [1, {MAX_BITS}], got {bits}")
        for idx, (w, a) in self.overrides.items():
            if idx < 0:
                raise ConfigError(f"override block index must be >= 0, got {idx}")
            if not (1 <= w <= MAX_BITS and 1 <= a <= MAX_BITS):
                raise ConfigError(f"override bits for block {idx} out of [1, {MAX_BITS}]")

    def bits_for_block(self, block_index: int) -> tuple[int, int]:
        if block_index in self.overrides:
            return self.overrides[block_index]
        return self.weight_bits, self.activation_bits

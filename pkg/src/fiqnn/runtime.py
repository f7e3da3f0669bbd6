"""Integer-only inference: export fold, requantization, and the executor.

A student block computes, in the real-valued reference path,

    codes_out = clamp(round(QA * clip01(alpha * acc / (QW * D_in))), 0, QA)

where acc is the integer accumulator of centered weight codes against input
codes, QW = 2^wbits - 1, QA = 2^abits - 1, and D_in is the input grid
denominator (2^input_bits - 1 for the first layer, the previous block's QA
afterwards). Because clamping commutes with rounding here, that equals

    codes_out = clamp(round(acc * (alpha * QA) / (QW * D_in)), 0, QA)

so one exact rational ratio per layer realizes the whole block. The
multiply-shift mode approximates the ratio by M / 2^shift with relative error
at most 2^-16; the exact-rational mode keeps the reduced fraction and serves
as the bit-level oracle. Weight codes are stored centered (2*code - QW), which
removes the dequantization offset entirely, so the model carries no bias
terms and no real-valued parameters. See docs/model-format.md for the full
derivation.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import (
    AccumulatorOverflowError,
    ConfigError,
    DimensionError,
    FormatError,
    RangeError,
    StateError,
)
from .layers import (
    Clip01Layer,
    ConvLayer,
    DenseLayer,
    LayerSpec,
    NetworkSpec,
    ScaleLayer,
    StudentNet,
)
from .quantize import QuantConfig, levels, rescale_weight, round_half_away
from .tensor import FloatTrap, IntTensor, int_conv2d_raw, int_matmul_raw, maxpool2d

MULTIPLIER_BITS = 31  # M < 2^31
MAX_SHIFT = 62
REL_ERROR_BITS = 16  # multiply-shift must approximate within 2^-16 relative


@dataclass
class RequantParams:
    """Fixed rational rescale carried by one layer.

    Stores both realizations: the reduced exact fraction num/den, and the
    multiply-shift pair (mult, shift) with mult/2^shift ~ num/den. out_bits is
    the activation width the result is clamped to."""

    num: int
    den: int
    mult: int
    shift: int
    out_bits: int

    def __post_init__(self):
        if self.num < 1 or self.den < 1:
            raise ConfigError("requantization ratio must be positive")
        if not 0 <= self.mult < 2**MULTIPLIER_BITS:
            raise ConfigError(f"multiplier {self.mult} outside [0, 2^{MULTIPLIER_BITS})")
        if not 0 <= self.shift <= MAX_SHIFT:
            raise ConfigError(f"shift {self.shift} outside [0, {MAX_SHIFT}]")
        # relative error bound: |M/2^s - num/den| <= 2^-16 * num/den
        lhs = abs(self.mult * self.den - self.num * (1 << self.shift)) << REL_ERROR_BITS
        if lhs > self.num * (1 << self.shift):
            raise ConfigError("multiply-shift pair misses the 2^-16 error budget")

    @classmethod
    def from_ratio(cls, ratio: Fraction, out_bits: int) -> "RequantParams":
        num, den = ratio.numerator, ratio.denominator
        if num < 1:
            raise ConfigError("requantization ratio must be positive")
        shift = MAX_SHIFT
        while shift >= 0:
            mult = (2 * num * (1 << shift) + den) // (2 * den)  # round half away
            if mult < 2**MULTIPLIER_BITS:
                break
            shift -= 1
        else:
            raise ConfigError(f"ratio {ratio} too large for multiply-shift")
        return cls(num=num, den=den, mult=mult, shift=shift, out_bits=out_bits)


def _round_div_half_away(t: np.ndarray, den: int) -> np.ndarray:
    sign = np.sign(t)
    return sign * ((2 * np.abs(t) + den) // (2 * den))


def _round_shift_half_away(v: np.ndarray, shift: int) -> np.ndarray:
    if shift == 0:
        return v
    half = 1 << (shift - 1)
    return np.sign(v) * ((np.abs(v) + half) >> shift)


def requantize(acc, params: RequantParams, mode: str = "multiply_shift"):
    """Accumulator to activation code: integer multiply, round half away from
    zero, clamp to [0, 2^out_bits - 1]."""
    a = np.asarray(acc, dtype=np.int64)
    if mode == "exact_rational":
        r = _round_div_half_away(a * params.num, params.den)
    elif mode == "multiply_shift":
        r = _round_shift_half_away(a * params.mult, params.shift)
    else:
        raise ConfigError(f"unknown requantization mode {mode!r}")
    r = np.clip(r, 0, levels(params.out_bits))
    return r if isinstance(acc, np.ndarray) else int(r)


@dataclass
class ConvRecord:
    out_channels: int
    in_channels: int
    kernel: int
    stride: int
    padding: int
    wbits: int
    weights: IntTensor  # centered codes, kind="weight"
    alpha: int
    has_scale: bool
    requant: RequantParams | None


@dataclass
class DenseRecord:
    units: int
    in_features: int
    wbits: int
    weights: IntTensor  # centered codes, kind="weight"
    alpha: int
    has_scale: bool
    requant: RequantParams | None


@dataclass
class PoolRecord:
    size: int


@dataclass
class FlattenRecord:
    pass


@dataclass
class IntegerModel:
    """BN-free student in integer form: the only artifact the runtime executes."""

    weight_bits: int
    activation_bits: int
    input_bits: int
    input_shape: tuple[int, int, int]
    classes: int
    records: list = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.validate()

    def validate(self) -> None:
        if not self.records:
            raise FormatError("integer model has no layers")
        din = levels(self.input_bits)
        for idx, rec in enumerate(self.records):
            if isinstance(rec, (ConvRecord, DenseRecord)):
                if rec.weights.data.dtype.kind != "i":
                    raise FormatError(f"layer {idx}: non-integer weights")
                fan_in = (
                    rec.in_channels * rec.kernel * rec.kernel
                    if isinstance(rec, ConvRecord)
                    else rec.in_features
                )
                in_bits = int(math.ceil(math.log2(din + 1)))
                if fan_in > 2**31 // (2**rec.wbits * 2**in_bits):
                    raise AccumulatorOverflowError(
                        f"layer {idx}: fan-in {fan_in} exceeds the static bound "
                        f"for W={rec.wbits}, A_in={in_bits}",
                        layer=idx,
                    )
                max_acc = fan_in * levels(rec.wbits) * din
                if rec.requant is not None:
                    # headroom for the round-half-away bias inside int64
                    worst = max_acc * max(rec.requant.mult, rec.requant.num)
                    if worst >= 2**61:
                        raise AccumulatorOverflowError(
                            f"layer {idx}: requantization product may overflow",
                            layer=idx,
                        )
                    din = levels(rec.requant.out_bits)
        last_op = [r for r in self.records if isinstance(r, (ConvRecord, DenseRecord))][-1]
        if last_op.requant is not None:
            raise FormatError("final layer must emit raw integer logits")

    def logit_scale(self) -> Fraction:
        """Exact scale mapping integer logits to reference real logits."""
        din = levels(self.input_bits)
        scale = Fraction(1)
        for rec in self.records:
            if isinstance(rec, (ConvRecord, DenseRecord)):
                scale = Fraction(1, levels(rec.wbits) * din)
                if rec.requant is not None:
                    din = levels(rec.requant.out_bits)
        return scale


def export(student: StudentNet) -> IntegerModel:
    """Fold a frozen student into an IntegerModel (see module docstring)."""
    if not student.fully_frozen:
        raise StateError("student must be fully frozen before export")
    spec = student.spec
    records = []
    din_bits = 8  # dataset pixel codes
    din = levels(din_bits)
    for b, (start, end) in enumerate(student.blocks):
        op = student.layers[start]
        if not op.quantize or op.codes is None:
            raise StateError(
                f"block {b}: unquantized weights cannot be exported to integers"
            )
        qw = levels(op.wbits)
        centered = IntTensor(2 * op.codes.data - qw, bits=op.wbits, kind="weight")
        alpha = 1
        has_scale = False
        requant = None
        tail = []
        for layer in student.layers[start + 1 : end]:
            if isinstance(layer, ScaleLayer):
                if layer.alpha is None:
                    raise StateError(f"block {b}: scale factor not set")
                alpha = int(layer.alpha)
                has_scale = True
            elif isinstance(layer, Clip01Layer):
                if not layer.quantize:
                    raise StateError(
                        f"block {b}: unquantized activations cannot be exported"
                    )
                qa = levels(layer.abits)
                requant = RequantParams.from_ratio(
                    Fraction(alpha * qa, qw * din), out_bits=layer.abits
                )
            elif layer.spec.kind == "maxpool":
                tail.append(PoolRecord(layer.spec.pool_size))
            elif layer.spec.kind == "flatten":
                tail.append(FlattenRecord())
        if isinstance(op, ConvLayer):
            rec = ConvRecord(
                out_channels=op.spec.out_channels,
                in_channels=op.in_shape[0],
                kernel=op.spec.kernel,
                stride=op.spec.stride,
                padding=op.spec.padding,
                wbits=op.wbits,
                weights=centered,
                alpha=alpha,
                has_scale=has_scale,
                requant=requant,
            )
        else:
            rec = DenseRecord(
                units=op.spec.units,
                in_features=op.in_shape[0],
                wbits=op.wbits,
                weights=centered,
                alpha=alpha,
                has_scale=has_scale,
                requant=requant,
            )
        records.append(rec)
        records.extend(tail)
        if requant is not None:
            din = levels(requant.out_bits)
    return IntegerModel(
        weight_bits=spec.quant.weight_bits,
        activation_bits=spec.quant.activation_bits,
        input_bits=din_bits,
        input_shape=spec.input_shape,
        classes=spec.classes,
        records=records,
    )


def quantize_input(images: np.ndarray, input_bits: int = 8) -> IntTensor:
    """The single real-to-integer boundary: [0,1] reals to input codes."""
    x = np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0)
    codes = round_half_away(x * levels(input_bits)).astype(np.int64)
    return IntTensor(codes, bits=input_bits, kind="code")


def _infer_chunk(model: IntegerModel, x: np.ndarray, mode: str,
                 trace: list | None, trap: FloatTrap | None) -> np.ndarray:
    for idx, rec in enumerate(model.records):
        if isinstance(rec, ConvRecord):
            acc = int_conv2d_raw(x, rec.weights.data, rec.stride, rec.padding, layer=idx)
            x = requantize(acc, rec.requant, mode) if rec.requant else acc
        elif isinstance(rec, DenseRecord):
            acc = int_matmul_raw(x, rec.weights.data.T, layer=idx)
            x = requantize(acc, rec.requant, mode) if rec.requant else acc
        elif isinstance(rec, PoolRecord):
            x, _ = maxpool2d(x, rec.size)
        elif isinstance(rec, FlattenRecord):
            x = np.ascontiguousarray(x).reshape(x.shape[0], -1)
        if trap is not None:
            trap.observe(f"record[{idx}]:{type(rec).__name__}", x)
        if trace is not None:
            trace.append((idx, tuple(x.shape), x.copy()))
    return x


def worker_count() -> int:
    """Worker parallelism cap from FIQNN_THREADS (defaults to 1)."""
    raw = os.environ.get("FIQNN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"FIQNN_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def infer(
    model: IntegerModel,
    x: IntTensor,
    mode: str = "multiply_shift",
    trace: list | None = None,
    trap: FloatTrap | None = None,
    threads: int | None = None,
) -> IntTensor:
    """Run integer-only inference. Returns integer logits (N, classes).

    Input must already be integer codes of the model's input width; the one
    allowed real-to-integer conversion lives in quantize_input. Results are
    identical for any thread count because all arithmetic is exact."""
    if mode not in ("multiply_shift", "exact_rational"):
        raise ConfigError(f"unknown inference mode {mode!r}")
    data = x.data if isinstance(x, IntTensor) else np.asarray(x)
    if data.dtype.kind not in "iu":
        raise RangeError("infer expects integer input codes; use quantize_input")
    data = data.astype(np.int64, copy=False)
    hi = levels(model.input_bits)
    if data.size and (data.min() < 0 or data.max() > hi):
        raise RangeError(f"input codes outside [0, {hi}]")
    if data.ndim != 4 or data.shape[1:] != model.input_shape:
        raise DimensionError(
            f"input shape {data.shape} does not match model input {model.input_shape}"
        )
    nthreads = worker_count() if threads is None else max(1, threads)
    if nthreads == 1 or data.shape[0] < 2 * nthreads or trace is not None:
        out = _infer_chunk(model, data, mode, trace, trap)
    else:
        chunks = np.array_split(data, nthreads)
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            parts = list(pool.map(
                lambda c: _infer_chunk(model, c, mode, None, trap), chunks
            ))
        out = np.concatenate(parts, axis=0)
    return IntTensor(out, bits=64, kind="acc")


def write_trace(path, trace) -> None:
    """Conformance trace: one line per layer with index, shape, and the flat
    integer activations, for cross-implementation checking."""
    with open(path, "w") as fh:
        for idx, shape, values in trace:
            dims = "x".join(str(d) for d in shape)
            flat = " ".join(str(int(v)) for v in np.asarray(values).reshape(-1))
            fh.write(f"layer {idx} shape {dims}: {flat}\n")


# -- reference reconstruction ----------------------------------------------


def rebuild_student(model: IntegerModel) -> StudentNet:
    """Reconstruct the real-valued reference student from an integer model.

    The reference forward of the result is the oracle that exact-rational
    inference must reproduce code for code."""
    layer_specs = []
    overrides = {}
    block = 0
    for rec in model.records:
        if isinstance(rec, ConvRecord):
            layer_specs.append(
                LayerSpec("conv", out_channels=rec.out_channels, kernel=rec.kernel,
                          stride=rec.stride, padding=rec.padding)
            )
        elif isinstance(rec, DenseRecord):
            layer_specs.append(LayerSpec("dense", units=rec.units))
        elif isinstance(rec, PoolRecord):
            layer_specs.append(LayerSpec("maxpool", pool_size=rec.size))
            continue
        else:
            layer_specs.append(LayerSpec("flatten"))
            continue
        if rec.has_scale:
            layer_specs.append(LayerSpec("scale"))
        if rec.requant is not None:
            layer_specs.append(LayerSpec("clip01"))
            overrides[block] = (rec.wbits, rec.requant.out_bits)
        else:
            overrides[block] = (rec.wbits, model.activation_bits)
        block += 1
    quant = QuantConfig(
        weight_bits=model.weight_bits,
        activation_bits=model.activation_bits,
        overrides=overrides,
    )
    spec = NetworkSpec(layer_specs, quant, model.input_shape, model.classes)
    student = StudentNet(spec)
    op_records = [r for r in model.records if isinstance(r, (ConvRecord, DenseRecord))]
    for (start, _), rec in zip(student.blocks, op_records):
        op = student.layers[start]
        qw = levels(rec.wbits)
        raw = (rec.weights.data + qw) // 2
        if np.any(rec.weights.data != 2 * raw - qw):
            raise FormatError("weight codes are not on the centered grid")
        op.w = rescale_weight(raw, rec.wbits)
        op.codes = IntTensor(raw, bits=rec.wbits, kind="code")
        op.frozen = True
    for layer, rec in zip(
        (l for l in student.layers if isinstance(l, ScaleLayer)),
        (r for r in op_records if r.has_scale),
    ):
        layer.alpha = rec.alpha
    return student


def reference_record_outputs(
    student: StudentNet, x_codes: np.ndarray, input_bits: int = 8
) -> list[np.ndarray]:
    """Reference forward captured at the same boundaries as infer's trace.

    Returns one real-valued array per model record; quantized activations are
    reported as codes times 1/QA, logits as reference reals."""
    x = np.asarray(x_codes, dtype=np.float64) / levels(input_bits)
    outputs = []
    for start, end in student.blocks:
        pending = None
        for layer in student.layers[start:end]:
            x, _ = layer.forward(x, training=False)
            if isinstance(layer, (ConvLayer, DenseLayer)):
                pending = x
            elif isinstance(layer, Clip01Layer):
                pending = x
            elif layer.spec.kind in ("maxpool", "flatten"):
                if pending is not None:
                    outputs.append(pending)
                    pending = None
                outputs.append(x)
        if pending is not None:
            outputs.append(pending)
    return outputs

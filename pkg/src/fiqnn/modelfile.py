"""Binary serialization for integer models and network checkpoints.

One container format, magic "FIQN", little-endian throughout, CRC-32 trailer
over every preceding byte. Three payload kinds share the header:

  kind 1  integer model       folded records executed by the runtime
  kind 2  teacher checkpoint  layer list incl. batch-norm extension records
  kind 3  student checkpoint  layer list with weight codes and scale factors

Kind 1 carries no batch-norm records and no real-valued parameters; the
loader enforces that. Serialization is canonical, so load followed by save is
byte-identical. docs/model-format.md documents the exact byte layout.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import FormatError
from .layers import (
    BatchNormLayer,
    Clip01Layer,
    ConvLayer,
    DenseLayer,
    LayerSpec,
    MaxPoolLayer,
    Network,
    NetworkSpec,
    ScaleLayer,
    StudentNet,
    TeacherNet,
)
from .quantize import QuantConfig, rescale_weight
from .runtime import (
    ConvRecord,
    DenseRecord,
    FlattenRecord,
    IntegerModel,
    PoolRecord,
    RequantParams,
)
from .tensor import IntTensor

MAGIC = b"FIQN"
VERSION = 1
ENDIAN_TAG = 0x0102

KIND_INTEGER_MODEL = 1
KIND_TEACHER = 2
KIND_STUDENT = 3

_TAG_CONV = 1
_TAG_DENSE = 2
_TAG_MAXPOOL = 3
_TAG_FLATTEN = 4
_TAG_BATCHNORM = 5
_TAG_SCALE = 6
_TAG_CLIP01 = 7


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def pack(self, fmt: str, *values):
        self.parts.append(struct.pack("<" + fmt, *values))

    def array(self, a: np.ndarray, dtype: str):
        self.parts.append(np.ascontiguousarray(a, dtype=np.dtype(dtype)).tobytes())

    def finish(self) -> bytes:
        body = b"".join(self.parts)
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated file: wanted {n} bytes at offset {self.pos}",
                offset=self.pos,
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals if len(vals) > 1 else vals[0]

    def array(self, count: int, dtype: str) -> np.ndarray:
        dt = np.dtype(dtype)
        raw = self.take(count * dt.itemsize)
        return np.frombuffer(raw, dtype=dt).copy()


def _write_header(w: _Writer, kind: int, wbits: int, abits: int, input_bits: int,
                  input_shape, classes: int, count: int):
    w.parts.append(MAGIC)
    w.pack("HHBBBB", VERSION, ENDIAN_TAG, kind, wbits, abits, input_bits)
    dims = tuple(input_shape) + (0,) * (3 - len(input_shape))  # 0 pads 1-D shapes
    w.pack("IIII", *dims, classes)
    w.pack("I", count)


def _read_header(r: _Reader):
    magic = r.take(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    version, endian, kind, wbits, abits, input_bits = r.unpack("HHBBBB")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4)
    if endian != ENDIAN_TAG:
        raise FormatError(f"endian tag 0x{endian:04x} != 0x{ENDIAN_TAG:04x}", offset=6)
    c, h, w, classes = r.unpack("IIII")
    count = r.unpack("I")
    shape = tuple(d for d in (c, h, w) if d)
    return kind, wbits, abits, input_bits, shape, classes, count


def _check_crc(buf: bytes):
    if len(buf) < 4:
        raise FormatError("file too short for a CRC trailer", offset=0)
    body, trailer = buf[:-4], buf[-4:]
    (stored,) = struct.unpack("<I", trailer)
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if stored != actual:
        raise FormatError(
            f"CRC mismatch: stored 0x{stored:08x}, computed 0x{actual:08x}",
            offset=len(buf) - 4,
        )
    return body


# -- kind 1: integer model ---------------------------------------------------


def _write_requant(w: _Writer, rq: RequantParams | None):
    if rq is None:
        w.pack("B", 0)
    else:
        w.pack("B", 1)
        w.pack("QQIBB", rq.num, rq.den, rq.mult, rq.shift, rq.out_bits)


def _read_requant(r: _Reader) -> RequantParams | None:
    if not r.unpack("B"):
        return None
    num, den, mult, shift, out_bits = r.unpack("QQIBB")
    return RequantParams(num=num, den=den, mult=mult, shift=shift, out_bits=out_bits)


def serialize_integer_model(model: IntegerModel) -> bytes:
    w = _Writer()
    _write_header(
        w, KIND_INTEGER_MODEL, model.weight_bits, model.activation_bits,
        model.input_bits, model.input_shape, model.classes, len(model.records),
    )
    for rec in model.records:
        if isinstance(rec, ConvRecord):
            w.pack("B", _TAG_CONV)
            w.pack("IIIII", rec.out_channels, rec.in_channels, rec.kernel,
                   rec.stride, rec.padding)
            w.pack("BBI", rec.wbits, int(rec.has_scale), rec.alpha)
            _write_requant(w, rec.requant)
            w.array(rec.weights.data, "<i2")
        elif isinstance(rec, DenseRecord):
            w.pack("B", _TAG_DENSE)
            w.pack("II", rec.units, rec.in_features)
            w.pack("BBI", rec.wbits, int(rec.has_scale), rec.alpha)
            _write_requant(w, rec.requant)
            w.array(rec.weights.data, "<i2")
        elif isinstance(rec, PoolRecord):
            w.pack("B", _TAG_MAXPOOL)
            w.pack("I", rec.size)
        elif isinstance(rec, FlattenRecord):
            w.pack("B", _TAG_FLATTEN)
        else:
            raise FormatError(f"cannot serialize record {type(rec).__name__}")
    return w.finish()


def _deserialize_integer_model(r: _Reader, header) -> IntegerModel:
    _, wbits, abits, input_bits, input_shape, classes, count = header
    records = []
    for _ in range(count):
        tag = r.unpack("B")
        if tag == _TAG_CONV:
            oc, ic, k, s, p = r.unpack("IIIII")
            wb, has_scale, alpha = r.unpack("BBI")
            rq = _read_requant(r)
            codes = r.array(oc * ic * k * k, "<i2").astype(np.int64)
            records.append(ConvRecord(
                out_channels=oc, in_channels=ic, kernel=k, stride=s, padding=p,
                wbits=wb, weights=IntTensor(codes.reshape(oc, ic, k, k), wb, "weight"),
                alpha=alpha, has_scale=bool(has_scale), requant=rq,
            ))
        elif tag == _TAG_DENSE:
            units, feats = r.unpack("II")
            wb, has_scale, alpha = r.unpack("BBI")
            rq = _read_requant(r)
            codes = r.array(units * feats, "<i2").astype(np.int64)
            records.append(DenseRecord(
                units=units, in_features=feats, wbits=wb,
                weights=IntTensor(codes.reshape(units, feats), wb, "weight"),
                alpha=alpha, has_scale=bool(has_scale), requant=rq,
            ))
        elif tag == _TAG_MAXPOOL:
            records.append(PoolRecord(r.unpack("I")))
        elif tag == _TAG_FLATTEN:
            records.append(FlattenRecord())
        elif tag in (_TAG_BATCHNORM, _TAG_SCALE, _TAG_CLIP01):
            raise FormatError(
                f"record tag {tag} is not allowed in an integer model",
                offset=r.pos - 1,
            )
        else:
            raise FormatError(f"unknown record tag {tag}", offset=r.pos - 1)
    return IntegerModel(
        weight_bits=wbits, activation_bits=abits, input_bits=input_bits,
        input_shape=input_shape, classes=classes, records=records,
    )


# -- kinds 2 and 3: network checkpoints --------------------------------------


def serialize_network(net: Network) -> bytes:
    kind = KIND_TEACHER if isinstance(net, TeacherNet) else KIND_STUDENT
    spec = net.spec
    w = _Writer()
    _write_header(
        w, kind, spec.quant.weight_bits, spec.quant.activation_bits, 8,
        spec.input_shape, spec.classes, len(net.layers),
    )
    for layer in net.layers:
        ls = layer.spec
        if isinstance(layer, ConvLayer):
            w.pack("B", _TAG_CONV)
            w.pack("IIIII", ls.out_channels, layer.in_shape[0], ls.kernel,
                   ls.stride, ls.padding)
            w.pack("BB", layer.wbits, int(layer.quantize))
            if layer.quantize:
                if layer.codes is None:
                    raise FormatError("cannot checkpoint an unfrozen quantized layer")
                w.array(layer.codes.data, "u1")
            else:
                w.array(layer.w, "<f8")
        elif isinstance(layer, DenseLayer):
            w.pack("B", _TAG_DENSE)
            w.pack("II", ls.units, layer.in_shape[0])
            w.pack("BB", layer.wbits, int(layer.quantize))
            if layer.quantize:
                if layer.codes is None:
                    raise FormatError("cannot checkpoint an unfrozen quantized layer")
                w.array(layer.codes.data, "u1")
            else:
                w.array(layer.w, "<f8")
        elif isinstance(layer, BatchNormLayer):
            w.pack("B", _TAG_BATCHNORM)
            bn = layer.bn
            w.pack("I", bn.gamma.shape[0])
            w.pack("dd", bn.epsilon, bn.momentum)
            for a in (bn.gamma, bn.beta, bn.running_mean, bn.running_var):
                w.array(a, "<f8")
        elif isinstance(layer, ScaleLayer):
            w.pack("B", _TAG_SCALE)
            if layer.alpha is None:
                w.pack("BI", 0, 0)
            else:
                w.pack("BI", 1, int(layer.alpha))
        elif isinstance(layer, Clip01Layer):
            w.pack("B", _TAG_CLIP01)
            w.pack("BB", int(layer.quantize), layer.abits)
        elif isinstance(layer, MaxPoolLayer):
            w.pack("B", _TAG_MAXPOOL)
            w.pack("I", ls.pool_size)
        else:
            w.pack("B", _TAG_FLATTEN)
    return w.finish()


def _deserialize_network(r: _Reader, header):
    kind, wbits_hdr, abits_hdr, _, input_shape, classes, count = header
    specs: list[LayerSpec] = []
    payloads = []
    for _ in range(count):
        tag = r.unpack("B")
        if tag == _TAG_CONV:
            oc, ic, k, s, p = r.unpack("IIIII")
            wb, quantized = r.unpack("BB")
            n = oc * ic * k * k
            data = (
                r.array(n, "u1").astype(np.int64)
                if quantized
                else r.array(n, "<f8")
            )
            specs.append(LayerSpec("conv", out_channels=oc, kernel=k, stride=s,
                                   padding=p, quantize_weights=bool(quantized)))
            payloads.append(("conv", wb, quantized, data.reshape(oc, ic, k, k)))
        elif tag == _TAG_DENSE:
            units, feats = r.unpack("II")
            wb, quantized = r.unpack("BB")
            n = units * feats
            data = (
                r.array(n, "u1").astype(np.int64)
                if quantized
                else r.array(n, "<f8")
            )
            specs.append(LayerSpec("dense", units=units,
                                   quantize_weights=bool(quantized)))
            payloads.append(("dense", wb, quantized, data.reshape(units, feats)))
        elif tag == _TAG_BATCHNORM:
            channels = r.unpack("I")
            eps, momentum = r.unpack("dd")
            arrs = [r.array(channels, "<f8") for _ in range(4)]
            specs.append(LayerSpec("batchnorm"))
            payloads.append(("batchnorm", eps, momentum, arrs))
        elif tag == _TAG_SCALE:
            has_alpha, alpha = r.unpack("BI")
            specs.append(LayerSpec("scale"))
            payloads.append(("scale", int(alpha) if has_alpha else None))
        elif tag == _TAG_CLIP01:
            quantize, abits = r.unpack("BB")
            specs.append(LayerSpec("clip01", quantize_activations=bool(quantize)))
            payloads.append(("clip01", abits))
        elif tag == _TAG_MAXPOOL:
            size = r.unpack("I")
            specs.append(LayerSpec("maxpool", pool_size=size))
            payloads.append(("maxpool",))
        elif tag == _TAG_FLATTEN:
            specs.append(LayerSpec("flatten"))
            payloads.append(("flatten",))
        else:
            raise FormatError(f"unknown record tag {tag}", offset=r.pos - 1)

    # recover per-block bit overrides from the payloads
    overrides = {}
    block = -1
    cur_w, cur_a = wbits_hdr, abits_hdr
    for spec, payload in zip(specs, payloads):
        if spec.kind in ("conv", "dense"):
            block += 1
            cur_w, cur_a = payload[1], abits_hdr
        elif spec.kind == "clip01":
            cur_a = payload[1]
        if block >= 0 and (cur_w, cur_a) != (wbits_hdr, abits_hdr):
            overrides[block] = (cur_w, cur_a)
    quant = QuantConfig(weight_bits=wbits_hdr, activation_bits=abits_hdr,
                        overrides=overrides)
    nspec = NetworkSpec(specs, quant, input_shape, classes)
    net = TeacherNet(nspec) if kind == KIND_TEACHER else StudentNet(nspec)
    for layer, payload in zip(net.layers, payloads):
        if isinstance(layer, (ConvLayer, DenseLayer)):
            _, wb, quantized, data = payload
            layer.wbits = wb
            if quantized:
                layer.codes = IntTensor(data, bits=wb, kind="code")
                layer.w = rescale_weight(data, wb)
            else:
                layer.w = data.astype(np.float64)
            layer.frozen = True
        elif isinstance(layer, BatchNormLayer):
            _, eps, momentum, (gamma, beta, rm, rv) = payload
            layer.bn.gamma, layer.bn.beta = gamma, beta
            layer.bn.running_mean, layer.bn.running_var = rm, rv
            layer.bn.epsilon, layer.bn.momentum = eps, momentum
            layer.bn.validate()
        elif isinstance(layer, ScaleLayer):
            layer.alpha = payload[1]
        elif isinstance(layer, Clip01Layer):
            layer.abits = payload[1]
    return net


# -- public API ---------------------------------------------------------------


def serialize(obj) -> bytes:
    if isinstance(obj, IntegerModel):
        return serialize_integer_model(obj)
    if isinstance(obj, Network):
        return serialize_network(obj)
    raise FormatError(f"cannot serialize {type(obj).__name__}")


def save(obj, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(obj))


def loads(buf: bytes):
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", offset=0)
    body = _check_crc(buf)
    r = _Reader(body)
    header = _read_header(r)
    kind = header[0]
    if kind == KIND_INTEGER_MODEL:
        obj = _deserialize_integer_model(r, header)
    elif kind in (KIND_TEACHER, KIND_STUDENT):
        obj = _deserialize_network(r, header)
    else:
        raise FormatError(f"unknown payload kind {kind}", offset=8)
    if r.pos != len(body):
        raise FormatError(f"{len(body) - r.pos} trailing bytes", offset=r.pos)
    return obj


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def load_integer_model(path) -> IntegerModel:
    obj = load(path)
    if not isinstance(obj, IntegerModel):
        raise FormatError(f"{path} is not an integer model file")
    return obj

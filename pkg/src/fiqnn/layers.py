"""Sequential quantized network graph.

A network is an ordered list of layers grouped into blocks: each block starts
at a conv or dense layer and carries the following normalization (batchnorm
for the teacher, an integer scale for the student), the clip-to-[0,1]
quantization point, and any pooling/flatten. Blocks are the unit the
distillation stages operate on.

Forward passes are functional: caches are returned to the caller rather than
stored on the layers, so evaluation-mode forwards are safe to run
concurrently. Training (which mutates batch-norm running statistics and
parameters) is single-writer by contract.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, StateError
from .quantize import (
    QuantConfig,
    quantize_dequantize,
    quantize_weight_tensor,
    ste_backward,
)
from .tensor import (
    as_real,
    conv2d,
    im2col,
    matmul,
    maxpool2d,
    maxpool2d_backward,
    pad_nchw,
)

LAYER_KINDS = ("conv", "dense", "batchnorm", "scale", "clip01", "maxpool", "flatten")

# Canonical order of kinds inside one block; anything else is rejected so the
# integer runtime can always fold the block.
_BLOCK_ORDER = {"batchnorm": 1, "scale": 1, "clip01": 2, "maxpool": 3, "flatten": 4}

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class LayerSpec:
    """Declarative description of one layer."""

    kind: str
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    units: int = 0
    pool_size: int = 0
    quantize_weights: bool = True
    quantize_activations: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and (self.out_channels < 1 or self.kernel < 1):
            raise ConfigError("conv layer needs positive channels and kernel")
        if self.kind == "dense" and self.units < 1:
            raise ConfigError("dense layer needs positive units")
        if self.kind == "maxpool" and self.pool_size < 1:
            raise ConfigError("maxpool layer needs positive pool size")


@dataclass
class BNParams:
    """Batch normalization state for one layer."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM

    def validate(self):
        if np.any(self.running_var < 0):
            raise NumericError("negative running variance")
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError(f"BN momentum must be in (0,1), got {self.momentum}")


def identity_bn(channels: int) -> BNParams:
    """BN state that is an exact no-op in eval mode (epsilon folded to zero)."""
    return BNParams(
        gamma=np.ones(channels),
        beta=np.zeros(channels),
        running_mean=np.zeros(channels),
        running_var=np.ones(channels),
        epsilon=0.0,
    )


@dataclass
class NetworkSpec:
    """Ordered layer list plus quantization config and input/output shapes."""

    layers: list[LayerSpec]
    quant: QuantConfig
    input_shape: tuple[int, int, int]
    classes: int

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.validate()

    def validate(self) -> None:
        if not self.layers:
            raise ConfigError("network needs at least one layer")
        kinds = {l.kind for l in self.layers}
        if "batchnorm" in kinds and "scale" in kinds:
            raise ConfigError("batchnorm and scale are mutually exclusive in one network")
        if self.layers[0].kind not in ("conv", "dense"):
            raise ConfigError("first layer must be conv or dense")
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        # enforce canonical in-block ordering
        pos = 0
        for spec in self.layers:
            if spec.kind in ("conv", "dense"):
                pos = 0
                continue
            nxt = _BLOCK_ORDER[spec.kind]
            if nxt <= pos:
                raise ConfigError(
                    f"layer kind {spec.kind!r} out of order within its block"
                )
            pos = nxt
        blocks = self.block_slices()
        for spec in self.layers[blocks[-1][0] :]:
            if spec.kind in ("batchnorm", "scale"):
                raise ConfigError("the final (logits) block cannot be normalized")
        self.shape_chain()  # raises on any mismatch

    def block_slices(self) -> list[tuple[int, int]]:
        """(start, end) layer-index ranges, one per conv/dense block."""
        starts = [i for i, l in enumerate(self.layers) if l.kind in ("conv", "dense")]
        ends = starts[1:] + [len(self.layers)]
        return list(zip(starts, ends))

    def shape_chain(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes (sample shapes, no batch axis)."""
        shape = self.input_shape
        chain = []
        for i, spec in enumerate(self.layers):
            shape = _infer_shape(spec, shape, i)
            chain.append(shape)
        if chain[-1] != (self.classes,):
            raise ConfigError(
                f"network output shape {chain[-1]} does not match {self.classes} classes"
            )
        return chain

    def student_spec(self) -> "NetworkSpec":
        """The structurally dual spec: batchnorm layers replaced by scale layers."""
        layers = [
            replace(l, kind="scale") if l.kind == "batchnorm" else replace(l)
            for l in self.layers
        ]
        return NetworkSpec(layers, self.quant, self.input_shape, self.classes)


def _infer_shape(spec: LayerSpec, shape: tuple[int, ...], idx: int) -> tuple[int, ...]:
    kind = spec.kind
    if kind == "conv":
        if len(shape) != 3:
            raise ConfigError(f"layer {idx}: conv needs CHW input, got {shape}")
        c, h, w = shape
        span = spec.kernel
        oh = (h + 2 * spec.padding - span) // spec.stride + 1
        ow = (w + 2 * spec.padding - span) // spec.stride + 1
        if oh < 1 or ow < 1:
            raise ConfigError(f"layer {idx}: conv output collapses on input {shape}")
        return (spec.out_channels, oh, ow)
    if kind == "dense":
        if len(shape) != 1:
            raise ConfigError(f"layer {idx}: dense needs flat input, got {shape}")
        return (spec.units,)
    if kind in ("batchnorm", "scale", "clip01"):
        return shape
    if kind == "maxpool":
        if len(shape) != 3:
            raise ConfigError(f"layer {idx}: maxpool needs CHW input, got {shape}")
        c, h, w = shape
        if h < spec.pool_size or w < spec.pool_size:
            raise ConfigError(f"layer {idx}: pool size exceeds spatial dims {shape}")
        return (c, h // spec.pool_size, w // spec.pool_size)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    raise ConfigError(f"unknown layer kind {kind!r}")


def validate_duality(teacher: NetworkSpec, student: NetworkSpec) -> None:
    """Require identical structure except batchnorm <-> scale substitution."""
    if len(teacher.layers) != len(student.layers):
        raise ConfigError("teacher and student layer counts differ")
    for i, (t, s) in enumerate(zip(teacher.layers, student.layers)):
        tk = "scale" if t.kind == "batchnorm" else t.kind
        t_fields = {k: v for k, v in vars(t).items() if k != "kind"}
        s_fields = {k: v for k, v in vars(s).items() if k != "kind"}
        if tk != s.kind or t_fields != s_fields:
            raise ConfigError(f"teacher/student mismatch at layer {i}")
    if (
        teacher.input_shape != student.input_shape
        or teacher.classes != student.classes
    ):
        raise ConfigError("teacher/student input shape or class count differ")


# ---------------------------------------------------------------------------
# concrete layers


class ConvLayer:
    def __init__(self, spec: LayerSpec, in_shape, wbits: int):
        self.spec = spec
        self.in_shape = tuple(in_shape)
        self.wbits = wbits
        self.quantize = spec.quantize_weights
        c = in_shape[0]
        self.w = np.zeros((spec.out_channels, c, spec.kernel, spec.kernel))
        self.codes = None
        self.frozen = False

    @property
    def fan_in(self) -> int:
        return self.in_shape[0] * self.spec.kernel * self.spec.kernel

    def init_params(self, rng: np.random.Generator):
        bound = np.sqrt(6.0 / self.fan_in)
        self.w = rng.uniform(-bound, bound, size=self.w.shape)

    def effective_weight(self) -> np.ndarray:
        if self.quantize:
            _, dq = quantize_weight_tensor(self.w, self.wbits)
            return dq
        return self.w

    def forward(self, x, training):
        weff = self.effective_weight()
        y = conv2d(x, weff, self.spec.stride, self.spec.padding)
        cache = (x, weff) if training else None
        return y, cache

    def backward(self, grad, cache):
        x, weff = cache
        s, p = self.spec.stride, self.spec.padding
        o, ci, kh, kw = weff.shape
        n = x.shape[0]
        oh, ow = grad.shape[2], grad.shape[3]
        cols = im2col(x, kh, kw, s, p)
        gflat = grad.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        grad_weff = (gflat.T @ cols).reshape(o, ci, kh, kw)
        # input gradient: scatter each kernel tap back over the padded grid
        xp_shape = (n, ci, x.shape[2] + 2 * p, x.shape[3] + 2 * p)
        gxp = np.zeros(xp_shape)
        for a in range(kh):
            for b in range(kw):
                contrib = np.tensordot(grad, weff[:, :, a, b], axes=([1], [0]))
                gxp[:, :, a : a + oh * s : s, b : b + ow * s : s] += contrib.transpose(
                    0, 3, 1, 2
                )
        gx = gxp[:, :, p : p + x.shape[2], p : p + x.shape[3]] if p else gxp
        if self.quantize:
            grad_w = ste_backward(grad_weff, self.w, "weight")
        else:
            grad_w = grad_weff
        return np.ascontiguousarray(gx), {"w": grad_w}

    def params(self):
        return {"w": self.w}

    def freeze(self):
        if self.quantize:
            self.codes, self.w = quantize_weight_tensor(self.w, self.wbits)
        self.frozen = True


class DenseLayer:
    def __init__(self, spec: LayerSpec, in_shape, wbits: int):
        self.spec = spec
        self.in_shape = tuple(in_shape)
        self.wbits = wbits
        self.quantize = spec.quantize_weights
        self.w = np.zeros((spec.units, in_shape[0]))
        self.codes = None
        self.frozen = False

    @property
    def fan_in(self) -> int:
        return self.in_shape[0]

    def init_params(self, rng: np.random.Generator):
        bound = np.sqrt(6.0 / self.fan_in)
        self.w = rng.uniform(-bound, bound, size=self.w.shape)

    def effective_weight(self) -> np.ndarray:
        if self.quantize:
            _, dq = quantize_weight_tensor(self.w, self.wbits)
            return dq
        return self.w

    def forward(self, x, training):
        weff = self.effective_weight()
        y = matmul(x, weff.T)
        cache = (x, weff) if training else None
        return y, cache

    def backward(self, grad, cache):
        x, weff = cache
        grad_weff = grad.T @ x
        gx = grad @ weff
        if self.quantize:
            grad_w = ste_backward(grad_weff, self.w, "weight")
        else:
            grad_w = grad_weff
        return gx, {"w": grad_w}

    def params(self):
        return {"w": self.w}

    def freeze(self):
        if self.quantize:
            self.codes, self.w = quantize_weight_tensor(self.w, self.wbits)
        self.frozen = True


class BatchNormLayer:
    def __init__(self, spec: LayerSpec, in_shape):
        self.spec = spec
        self.in_shape = tuple(in_shape)
        self.bn = BNParams(
            gamma=np.ones(in_shape[0]),
            beta=np.zeros(in_shape[0]),
            running_mean=np.zeros(in_shape[0]),
            running_var=np.ones(in_shape[0]),
        )

    def init_params(self, rng):
        pass

    def _axes_and_shape(self, x):
        if x.ndim == 2:
            return (0,), (1, -1)
        if x.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        raise DimensionError(f"batchnorm expects 2-D or 4-D input, got {x.ndim}-D")

    def forward(self, x, training):
        bn = self.bn
        axes, pshape = self._axes_and_shape(x)
        if training:
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv = 1.0 / np.sqrt(var + bn.epsilon)
            xhat = (x - mu.reshape(pshape)) * inv.reshape(pshape)
            y = bn.gamma.reshape(pshape) * xhat + bn.beta.reshape(pshape)
            bn.running_mean = bn.momentum * bn.running_mean + (1 - bn.momentum) * mu
            bn.running_var = bn.momentum * bn.running_var + (1 - bn.momentum) * var
            if not np.isfinite(y).all():
                raise NumericError("batchnorm produced non-finite values")
            n_red = x.size // x.shape[1] if x.ndim == 4 else x.shape[0]
            return y, (xhat, inv, pshape, axes, n_red)
        scale = bn.gamma / np.sqrt(bn.running_var + bn.epsilon)
        y = scale.reshape(pshape) * (x - bn.running_mean.reshape(pshape)) + bn.beta.reshape(pshape)
        return y, None

    def backward(self, grad, cache):
        if cache is None:
            raise StateError("backward through eval-mode batchnorm is not supported")
        xhat, inv, pshape, axes, n_red = cache
        bn = self.bn
        dgamma = (grad * xhat).sum(axis=axes)
        dbeta = grad.sum(axis=axes)
        dxhat = grad * bn.gamma.reshape(pshape)
        mean_dxhat = dxhat.mean(axis=axes).reshape(pshape)
        mean_dxhat_xhat = (dxhat * xhat).mean(axis=axes).reshape(pshape)
        gx = inv.reshape(pshape) * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
        return gx, {"gamma": dgamma, "beta": dbeta}

    def params(self):
        return {"gamma": self.bn.gamma, "beta": self.bn.beta}


class ScaleLayer:
    def __init__(self, spec: LayerSpec, in_shape):
        self.spec = spec
        self.in_shape = tuple(in_shape)
        self.alpha: int | None = None

    def init_params(self, rng):
        pass

    def forward(self, x, training):
        if self.alpha is None:
            raise StateError("scale factor not set; run stage-1 initialization first")
        return float(self.alpha) * x, None

    def backward(self, grad, cache):
        if self.alpha is None:
            raise StateError("scale factor not set")
        return float(self.alpha) * grad, {}

    def params(self):
        return {}


class Clip01Layer:
    def __init__(self, spec: LayerSpec, in_shape, abits: int):
        self.spec = spec
        self.in_shape = tuple(in_shape)
        self.abits = abits
        self.quantize = spec.quantize_activations

    def init_params(self, rng):
        pass

    def forward(self, x, training):
        c = np.clip(x, 0.0, 1.0)
        y = quantize_dequantize(c, self.abits) if self.quantize else c
        cache = x if training else None
        return y, cache

    def backward(self, grad, cache):
        # clip passes gradient strictly inside (0,1); the quantizer's STE mask
        # on the clipped value coincides with the same region.
        mask = (cache > 0.0) & (cache < 1.0)
        return grad * mask, {}

    def params(self):
        return {}


class MaxPoolLayer:
    def __init__(self, spec: LayerSpec, in_shape):
        self.spec = spec
        self.in_shape = tuple(in_shape)

    def init_params(self, rng):
        pass

    def forward(self, x, training):
        y, idx = maxpool2d(x, self.spec.pool_size)
        cache = (idx, x.shape) if training else None
        return y, cache

    def backward(self, grad, cache):
        idx, in_shape = cache
        return maxpool2d_backward(grad, idx, in_shape, self.spec.pool_size), {}

    def params(self):
        return {}


class FlattenLayer:
    def __init__(self, spec: LayerSpec, in_shape):
        self.spec = spec
        self.in_shape = tuple(in_shape)

    def init_params(self, rng):
        pass

    def forward(self, x, training):
        y = np.ascontiguousarray(x).reshape(x.shape[0], -1)
        cache = x.shape if training else None
        return y, cache

    def backward(self, grad, cache):
        return grad.reshape(cache), {}

    def params(self):
        return {}


def _build_layer(spec: LayerSpec, in_shape, wbits: int, abits: int):
    if spec.kind == "conv":
        return ConvLayer(spec, in_shape, wbits)
    if spec.kind == "dense":
        return DenseLayer(spec, in_shape, wbits)
    if spec.kind == "batchnorm":
        return BatchNormLayer(spec, in_shape)
    if spec.kind == "scale":
        return ScaleLayer(spec, in_shape)
    if spec.kind == "clip01":
        return Clip01Layer(spec, in_shape, abits)
    if spec.kind == "maxpool":
        return MaxPoolLayer(spec, in_shape)
    if spec.kind == "flatten":
        return FlattenLayer(spec, in_shape)
    raise ConfigError(f"unknown layer kind {spec.kind!r}")


@dataclass
class BlockTaps:
    """Signals recorded per block during a forward pass."""

    pre_norm: np.ndarray  # after conv/dense, before batchnorm/scale
    post_norm: np.ndarray  # after batchnorm/scale (equals pre_norm when absent)
    output: np.ndarray  # after the block's last layer


@dataclass
class ForwardResult:
    output: np.ndarray
    taps: list[BlockTaps] = field(default_factory=list)
    caches: list | None = None


class Network:
    """A built sequential network with per-layer parameters."""

    role = "network"

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self.layers = []
        shapes = spec.shape_chain()
        in_shapes = [spec.input_shape] + shapes[:-1]
        block = -1
        for lspec, ishape in zip(spec.layers, in_shapes):
            if lspec.kind in ("conv", "dense"):
                block += 1
            wbits, abits = spec.quant.bits_for_block(max(block, 0))
            self.layers.append(_build_layer(lspec, ishape, wbits, abits))
        self.blocks = spec.block_slices()
        if spec.quant.exempt_edge_layers:
            first = self.layers[self.blocks[0][0]]
            last = self.layers[self.blocks[-1][0]]
            first.quantize = False
            last.quantize = False

    # -- construction -----------------------------------------------------

    def init_params(self, rng: np.random.Generator):
        for layer in self.layers:
            layer.init_params(rng)
        return self

    def param_layers(self):
        """(layer_index, layer) for every conv/dense layer, in order."""
        return [(start, self.layers[start]) for start, _ in self.blocks]

    def block_of_layer(self, layer_index: int) -> int:
        for b, (start, end) in enumerate(self.blocks):
            if start <= layer_index < end:
                return b
        raise StateError(f"layer index {layer_index} out of range")

    # -- execution ---------------------------------------------------------

    def prepare_input(self, x) -> np.ndarray:
        x = as_real(x)
        if x.shape[1:] != tuple(self.spec.input_shape):
            flat = int(np.prod(x.shape[1:]))
            if len(self.spec.input_shape) == 1 and flat == self.spec.input_shape[0]:
                return x.reshape(x.shape[0], flat)  # dense-first nets eat NCHW data
            raise DimensionError(
                f"input sample shape {x.shape[1:]} != {self.spec.input_shape}"
            )
        return x

    def forward(
        self,
        x,
        training: bool = False,
        upto_block: int | None = None,
        want_taps: bool = False,
    ) -> ForwardResult:
        x = self.prepare_input(x)
        last = len(self.blocks) - 1 if upto_block is None else upto_block
        end_layer = self.blocks[last][1]
        caches = [None] * len(self.layers)
        taps: list[BlockTaps] = []
        block = -1
        pre = post = None
        for i, layer in enumerate(self.layers[:end_layer]):
            kind = layer.spec.kind
            if kind in ("conv", "dense") and block >= 0 and want_taps:
                taps.append(BlockTaps(pre, post if post is not None else pre, x))
            if kind in ("conv", "dense"):
                block += 1
                pre = post = None
            x, caches[i] = layer.forward(x, training)
            if want_taps:
                if kind in ("conv", "dense"):
                    pre = x
                elif kind in ("batchnorm", "scale"):
                    post = x
        if want_taps:
            taps.append(BlockTaps(pre, post if post is not None else pre, x))
        return ForwardResult(x, taps, caches if training else None)

    def forward_block(self, block_index: int, x, training: bool = False):
        """Run a single block on the given input."""
        start, end = self.blocks[block_index]
        caches = []
        for layer in self.layers[start:end]:
            x, cache = layer.forward(x, training)
            caches.append(cache)
        return x, caches

    def backward_block(self, block_index: int, grad, caches):
        """Gradients of a block's output wrt its conv/dense weight and input."""
        start, end = self.blocks[block_index]
        weight_grad = None
        for off in range(end - start - 1, -1, -1):
            layer = self.layers[start + off]
            if caches[off] is None and layer.spec.kind in (
                "conv", "dense", "clip01", "maxpool", "flatten",
            ):
                raise StateError("backward_block needs caches from a training forward")
            grad, pgrads = layer.backward(grad, caches[off])
            if "w" in pgrads:
                weight_grad = pgrads["w"]
        return weight_grad, grad

    def backward(self, grad, caches):
        """Full backward pass; returns {(layer_index, param): gradient}."""
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if caches[i] is None and layer.params():
                raise StateError("backward needs caches from a training forward")
            grad, pgrads = layer.backward(grad, caches[i])
            for name, g in pgrads.items():
                grads[(i, name)] = g
        return grads

    # -- lifecycle ---------------------------------------------------------

    def freeze_weights(self):
        for _, layer in self.param_layers():
            layer.freeze()
        return self

    @property
    def fully_frozen(self) -> bool:
        return all(layer.frozen for _, layer in self.param_layers())

    def weight_checksum(self, upto_block: int | None = None) -> str:
        """SHA-256 over parameters of blocks [0, upto_block); all blocks if None."""
        h = hashlib.sha256()
        nblocks = len(self.blocks) if upto_block is None else upto_block
        for b in range(nblocks):
            start, end = self.blocks[b]
            for layer in self.layers[start:end]:
                if isinstance(layer, (ConvLayer, DenseLayer)):
                    h.update(np.ascontiguousarray(layer.w).tobytes())
                elif isinstance(layer, ScaleLayer) and layer.alpha is not None:
                    h.update(int(layer.alpha).to_bytes(8, "little"))
                elif isinstance(layer, BatchNormLayer):
                    for a in (layer.bn.gamma, layer.bn.beta,
                              layer.bn.running_mean, layer.bn.running_var):
                        h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


class TeacherNet(Network):
    role = "teacher"


class StudentNet(Network):
    role = "student"

    @property
    def alphas(self) -> list[int | None]:
        return [
            self.layers[i].alpha
            for i in range(len(self.layers))
            if isinstance(self.layers[i], ScaleLayer)
        ]


def build_teacher(spec: NetworkSpec, rng: np.random.Generator) -> TeacherNet:
    if any(l.kind == "scale" for l in spec.layers):
        raise ConfigError("teacher spec must use batchnorm, not scale")
    return TeacherNet(spec).init_params(rng)


def build_student_from_teacher(teacher: TeacherNet) -> StudentNet:
    """Structurally dual student with weights copied from the teacher's
    quantized grid values. Scale factors start unset."""
    sspec = teacher.spec.student_spec()
    validate_duality(teacher.spec, sspec)
    student = StudentNet(sspec)
    for (ti, tl), (si, sl) in zip(teacher.param_layers(), student.param_layers()):
        sl.w = tl.effective_weight().copy()
        sl.quantize = tl.quantize
    return student


# -- spec-level operation wrappers ----------------------------------------


def forward_teacher(net: TeacherNet, x, mode: str = "eval"):
    """Teacher forward. Returns (logits, taps); taps carry the post-BN signal
    and the quantized block output every distillation stage consumes."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be train or eval, got {mode!r}")
    res = net.forward(x, training=(mode == "train"), want_taps=True)
    return res.output, res.taps


def forward_student(net: StudentNet, x, upto: int | None = None):
    """Student forward, optionally stopping after block `upto` (0-based)."""
    res = net.forward(x, upto_block=upto, want_taps=True)
    return res.output, res.taps

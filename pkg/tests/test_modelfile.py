"""Binary model container: round-trips, corruption detection, kind handling."""

import struct

import numpy as np
import pytest

from fiqnn import modelfile
from fiqnn.errors import FormatError
from fiqnn.layers import BatchNormLayer, LayerSpec, NetworkSpec, build_teacher
from fiqnn.quantize import QuantConfig
from fiqnn.runtime import export
from tests.test_runtime import build_random_student


def small_teacher(seed=0, quant=None):
    layers = [
        LayerSpec("conv", out_channels=3, kernel=3, stride=1, padding=1),
        LayerSpec("batchnorm"),
        LayerSpec("clip01"),
        LayerSpec("maxpool", pool_size=2),
        LayerSpec("flatten"),
        LayerSpec("dense", units=5),
    ]
    spec = NetworkSpec(layers, quant or QuantConfig(4, 4), (1, 4, 4), 5)
    net = build_teacher(spec, np.random.default_rng(seed))
    for layer in net.layers:
        if isinstance(layer, BatchNormLayer):
            rng = np.random.default_rng(seed + 1)
            layer.bn.gamma = rng.uniform(0.5, 1.5, layer.bn.gamma.shape)
            layer.bn.beta = rng.uniform(-0.5, 0.5, layer.bn.beta.shape)
            layer.bn.running_mean = rng.uniform(-1, 1, layer.bn.running_mean.shape)
            layer.bn.running_var = rng.uniform(0.5, 2, layer.bn.running_var.shape)
    return net.freeze_weights()


class TestIntegerModelFile:
    def test_roundtrip_byte_identical(self, tmp_path):
        model = export(build_random_student(seed=1))
        path = tmp_path / "m.fiqn"
        modelfile.save(model, path)
        raw = path.read_bytes()
        assert raw[:4] == b"FIQN"
        again = modelfile.serialize(modelfile.loads(raw))
        assert again == raw

    def test_reload_preserves_records(self, tmp_path):
        model = export(build_random_student(seed=2, alphas=(7, 3)))
        path = tmp_path / "m.fiqn"
        modelfile.save(model, path)
        loaded = modelfile.load_integer_model(path)
        assert loaded.weight_bits == model.weight_bits
        assert loaded.input_shape == model.input_shape
        a = [r for r in model.records if hasattr(r, "weights")]
        b = [r for r in loaded.records if hasattr(r, "weights")]
        for ra, rb in zip(a, b):
            assert np.array_equal(ra.weights.data, rb.weights.data)
            assert ra.alpha == rb.alpha
            if ra.requant:
                assert (ra.requant.num, ra.requant.den) == (rb.requant.num, rb.requant.den)
                assert (ra.requant.mult, ra.requant.shift) == (rb.requant.mult, rb.requant.shift)

    def test_no_batchnorm_records(self, tmp_path):
        # structural invariant: an integer model file carries no BN sections
        model = export(build_random_student(seed=3))
        raw = modelfile.serialize(model)
        # decode record tags and verify none is the batch-norm tag
        r = modelfile._Reader(modelfile._check_crc(raw))
        header = modelfile._read_header(r)
        assert header[0] == modelfile.KIND_INTEGER_MODEL
        # tag-level scan is what the loader enforces too
        with pytest.raises(FormatError):
            bad = bytearray(raw)
            # splice a batchnorm tag where the first record tag sits
            bad[r.pos] = modelfile._TAG_BATCHNORM
            body = bytes(bad[:-4])
            import zlib
            bad[-4:] = struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
            modelfile.loads(bytes(bad))

    def test_bad_magic_offset(self):
        with pytest.raises(FormatError) as err:
            modelfile.loads(b"NOPE" + b"\0" * 40)
        assert err.value.offset == 0

    def test_truncation_detected(self, tmp_path):
        model = export(build_random_student(seed=4))
        raw = modelfile.serialize(model)
        with pytest.raises(FormatError):
            modelfile.loads(raw[: len(raw) // 2])

    def test_crc_corruption_detected(self):
        model = export(build_random_student(seed=5))
        raw = bytearray(modelfile.serialize(model))
        raw[len(raw) // 2] ^= 0xFF
        with pytest.raises(FormatError) as err:
            modelfile.loads(bytes(raw))
        assert "CRC" in str(err.value)

    def test_wrong_kind_rejected(self, tmp_path):
        teacher = small_teacher()
        path = tmp_path / "t.fiqn"
        modelfile.save(teacher, path)
        with pytest.raises(FormatError):
            modelfile.load_integer_model(path)


class TestNetworkCheckpoints:
    def test_teacher_roundtrip_byte_identical(self, tmp_path):
        teacher = small_teacher(seed=6)
        path = tmp_path / "t.fiqn"
        modelfile.save(teacher, path)
        raw = path.read_bytes()
        assert modelfile.serialize(modelfile.loads(raw)) == raw

    def test_teacher_reload_forward_identical(self, tmp_path):
        teacher = small_teacher(seed=7)
        path = tmp_path / "t.fiqn"
        modelfile.save(teacher, path)
        again = modelfile.load(path)
        x = np.random.default_rng(8).random((3, 1, 4, 4))
        assert np.array_equal(
            teacher.forward(x).output, again.forward(x).output
        )

    def test_teacher_with_overrides_roundtrip(self, tmp_path):
        quant = QuantConfig(4, 4, overrides={1: (8, 2)})
        teacher = small_teacher(seed=9, quant=quant)
        path = tmp_path / "t.fiqn"
        modelfile.save(teacher, path)
        again = modelfile.load(path)
        assert modelfile.serialize(again) == path.read_bytes()
        assert again.param_layers()[1][1].wbits == 8

    def test_student_roundtrip_with_alphas(self, tmp_path):
        student = build_random_student(seed=10, alphas=(9, 2))
        path = tmp_path / "s.fiqn"
        modelfile.save(student, path)
        again = modelfile.load(path)
        assert again.alphas == [9, 2]
        assert modelfile.serialize(again) == path.read_bytes()
        x = np.random.default_rng(11).random((2, 1, 6, 6))
        assert np.array_equal(student.forward(x).output, again.forward(x).output)

    def test_unfrozen_quantized_layer_rejected(self):
        layers = [LayerSpec("dense", units=2)]
        spec = NetworkSpec(layers, QuantConfig(4, 4), (3,), 2)
        net = build_teacher(spec, np.random.default_rng(12))
        with pytest.raises(FormatError):
            modelfile.serialize(net)

    def test_export_after_reload_matches(self, tmp_path):
        student = build_random_student(seed=13)
        model_direct = export(student)
        path = tmp_path / "s.fiqn"
        modelfile.save(student, path)
        model_via_file = export(modelfile.load(path))
        assert modelfile.serialize(model_direct) == modelfile.serialize(model_via_file)

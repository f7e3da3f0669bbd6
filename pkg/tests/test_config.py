"""Run configuration: parsing, rejection of unknown keys, canonical archive."""

import pytest

from fiqnn.config import format_config, parse_config, parse_layer_tokens
from fiqnn.errors import ConfigError

GOOD = """
# a comment
seed = 9
net.input_shape = 1x28x28
net.classes = 10
net.layers = conv:8:5:1:2, batchnorm, clip01, maxpool:2, flatten, dense:10
quant.weight_bits = 4
quant.activation_bits = 4
train.epochs = 2
train.lr_decay_epochs = 1,2
distill.input_source = student_prefix
distill.samples = 500
"""


class TestParsing:
    def test_good_config(self):
        cfg = parse_config(GOOD)
        assert cfg.seed == 9
        spec = cfg.network_spec()
        assert spec.input_shape == (1, 28, 28)
        assert len(spec.layers) == 6
        assert cfg.train_config().lr_decay_epochs == (1, 2)
        assert cfg.distill_config().input_source == "student_prefix"
        assert cfg.distill_config().samples == 500

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError) as err:
            parse_config("net.depth = 9")
        assert "unknown key" in str(err.value)

    def test_malformed_line_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("just some words")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("train.epochs = many")

    def test_bad_choice_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("distill.input_source = oracle")

    def test_overrides(self):
        cfg = parse_config(GOOD + "quant.overrides = 0:8:8;1:2:2\n")
        spec = cfg.network_spec()
        assert spec.quant.bits_for_block(0) == (8, 8)
        assert spec.quant.bits_for_block(1) == (2, 2)


class TestLayerTokens:
    def test_conv_defaults(self):
        layers = parse_layer_tokens("conv:4:3")
        assert layers[0].stride == 1 and layers[0].padding == 0

    def test_bad_token(self):
        with pytest.raises(ConfigError):
            parse_layer_tokens("polynomial:3")

    def test_parameterless_kind_rejects_args(self):
        with pytest.raises(ConfigError):
            parse_layer_tokens("batchnorm:2")

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            parse_layer_tokens(" , ")


class TestArchive:
    def test_roundtrip_is_stable(self):
        cfg = parse_config(GOOD)
        dump = format_config(cfg)
        again = parse_config(dump)
        assert format_config(again) == dump

    def test_dump_preserves_values(self):
        cfg = parse_config(GOOD)
        again = parse_config(format_config(cfg))
        assert again.seed == 9
        assert again.values["distill.samples"] == 500
        assert [l.kind for l in again.values["net.layers"]] == [
            l.kind for l in cfg.values["net.layers"]
        ]

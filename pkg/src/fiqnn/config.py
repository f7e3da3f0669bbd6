"""Plain-text run configuration: parsing, validation, canonical archiving.

Format is one `key = value` per line, `#` comments allowed. Unknown keys are
rejected. Every artifact-producing command archives the fully resolved
configuration (defaults materialized) plus the seed next to its outputs;
rerunning from that archive reproduces the outputs bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .distill import INPUT_SOURCES, DistillConfig
from .errors import ConfigError
from .layers import LayerSpec, NetworkSpec
from .quantize import QuantConfig
from .training import TrainConfig


def parse_layer_tokens(text: str) -> list[LayerSpec]:
    """Layer mini-grammar: comma-separated tokens.

    conv:<out>:<kernel>[:<stride>[:<padding>]] | dense:<units> | batchnorm |
    scale | clip01 | maxpool:<size> | flatten
    """
    layers = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        parts = token.split(":")
        kind, args = parts[0], parts[1:]
        try:
            if kind == "conv":
                if not 2 <= len(args) <= 4:
                    raise ConfigError(f"conv token needs 2-4 parameters: {token!r}")
                out_c, kernel = int(args[0]), int(args[1])
                stride = int(args[2]) if len(args) > 2 else 1
                padding = int(args[3]) if len(args) > 3 else 0
                layers.append(LayerSpec("conv", out_channels=out_c, kernel=kernel,
                                        stride=stride, padding=padding))
            elif kind == "dense":
                if len(args) != 1:
                    raise ConfigError(f"dense token needs 1 parameter: {token!r}")
                layers.append(LayerSpec("dense", units=int(args[0])))
            elif kind == "maxpool":
                if len(args) != 1:
                    raise ConfigError(f"maxpool token needs 1 parameter: {token!r}")
                layers.append(LayerSpec("maxpool", pool_size=int(args[0])))
            elif kind in ("batchnorm", "scale", "clip01", "flatten"):
                if args:
                    raise ConfigError(f"{kind} takes no parameters: {token!r}")
                layers.append(LayerSpec(kind))
            else:
                raise ConfigError(f"unknown layer token {kind!r}")
        except ValueError as err:
            raise ConfigError(f"bad integer in layer token {token!r}") from err
    if not layers:
        raise ConfigError("net.layers is empty")
    return layers


def format_layer_tokens(layers: list[LayerSpec]) -> str:
    tokens = []
    for l in layers:
        if l.kind == "conv":
            tokens.append(f"conv:{l.out_channels}:{l.kernel}:{l.stride}:{l.padding}")
        elif l.kind == "dense":
            tokens.append(f"dense:{l.units}")
        elif l.kind == "maxpool":
            tokens.append(f"maxpool:{l.pool_size}")
        else:
            tokens.append(l.kind)
    return ",".join(tokens)


def _parse_overrides(text: str) -> dict[int, tuple[int, int]]:
    out = {}
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        parts = item.split(":")
        if len(parts) != 3:
            raise ConfigError(f"override must be block:W:A, got {item!r}")
        out[int(parts[0])] = (int(parts[1]), int(parts[2]))
    return out


def _format_overrides(ov: dict) -> str:
    return ";".join(f"{k}:{w}:{a}" for k, (w, a) in sorted(ov.items()))


_BOOL = {"true": True, "false": False, "1": True, "0": False}

# key -> (type tag, default); None default means required when its section is used
_SCHEMA = {
    "seed": ("int", 1),
    "net.input_shape": ("shape", None),
    "net.classes": ("int", 10),
    "net.layers": ("layers", None),
    "quant.weight_bits": ("int", 4),
    "quant.activation_bits": ("int", 4),
    "quant.overrides": ("overrides", {}),
    "quant.exempt_edge_layers": ("bool", False),
    "train.epochs": ("int", 3),
    "train.batch_size": ("int", 64),
    "train.lr": ("float", 0.1),
    "train.lr_decay_epochs": ("intlist", ()),
    "train.lr_decay_factor": ("float", 0.1),
    "train.momentum": ("float", 0.9),
    "train.weight_decay": ("float", 1e-4),
    "distill.stage1_batches": ("int", 8),
    "distill.stage1_weight_steps": ("int", 0),
    "distill.stage1_lr": ("float", 0.01),
    "distill.stage2_epochs": ("int", 4),
    "distill.stage2_lr": ("float", 0.05),
    "distill.stage2_momentum": ("float", 0.9),
    "distill.batch_size": ("int", 64),
    "distill.input_source": ("choice:" + ",".join(INPUT_SOURCES), "teacher_prefix"),
    "distill.threshold": ("float", 1e-3),
    "distill.patience": ("int", 2),
    "distill.samples": ("optint", None),
    "data.format": ("choice:idx,cifar", "idx"),
    "data.train_images": ("str", ""),
    "data.train_labels": ("str", ""),
    "data.test_images": ("str", ""),
    "data.test_labels": ("str", ""),
}


def _parse_value(key: str, kind: str, raw: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "optint":
            return None if raw.lower() in ("", "none") else int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            return _BOOL[raw.lower()]
        if kind == "str":
            return raw
        if kind == "shape":
            dims = tuple(int(v) for v in raw.lower().split("x"))
            if len(dims) != 3:
                raise ConfigError(f"{key}: input shape must be CxHxW, got {raw!r}")
            return dims
        if kind == "intlist":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind == "layers":
            return parse_layer_tokens(raw)
        if kind == "overrides":
            return _parse_overrides(raw)
        if kind.startswith("choice:"):
            choices = kind.split(":", 1)[1].split(",")
            if raw not in choices:
                raise ConfigError(f"{key}: must be one of {choices}, got {raw!r}")
            return raw
    except (ValueError, KeyError) as err:
        raise ConfigError(f"{key}: cannot parse value {raw!r}") from err
    raise ConfigError(f"{key}: unhandled value kind {kind}")


@dataclass
class RunConfig:
    """Resolved configuration for one run."""

    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def network_spec(self) -> NetworkSpec:
        v = self.values
        if v["net.input_shape"] is None or v["net.layers"] is None:
            raise ConfigError("net.input_shape and net.layers are required")
        quant = QuantConfig(
            weight_bits=v["quant.weight_bits"],
            activation_bits=v["quant.activation_bits"],
            overrides=dict(v["quant.overrides"]),
            exempt_edge_layers=v["quant.exempt_edge_layers"],
        )
        return NetworkSpec(v["net.layers"], quant, v["net.input_shape"],
                           v["net.classes"])

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs=v["train.epochs"], batch_size=v["train.batch_size"],
            lr=v["train.lr"], lr_decay_epochs=v["train.lr_decay_epochs"],
            lr_decay_factor=v["train.lr_decay_factor"],
            momentum=v["train.momentum"], weight_decay=v["train.weight_decay"],
            seed=v["seed"],
        )

    def distill_config(self) -> DistillConfig:
        v = self.values
        return DistillConfig(
            stage1_batches=v["distill.stage1_batches"],
            stage1_weight_steps=v["distill.stage1_weight_steps"],
            stage1_lr=v["distill.stage1_lr"],
            stage2_epochs=v["distill.stage2_epochs"],
            stage2_lr=v["distill.stage2_lr"],
            stage2_momentum=v["distill.stage2_momentum"],
            batch_size=v["distill.batch_size"],
            input_source=v["distill.input_source"],
            threshold=v["distill.threshold"],
            patience=v["distill.patience"],
            samples=v["distill.samples"],
            seed=v["seed"],
        )

    def data_paths(self, split: str) -> tuple[str, str]:
        v = self.values
        images = v[f"data.{split}_images"]
        labels = v[f"data.{split}_labels"]
        if not images or not labels:
            raise ConfigError(f"data.{split}_images and data.{split}_labels required")
        return images, labels


def parse_config(text: str) -> RunConfig:
    values = {key: default for key, (_, default) in _SCHEMA.items()}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, _SCHEMA[key][0], raw)
    return RunConfig(values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: RunConfig) -> str:
    """Canonical serialization: every key, schema order, parseable back."""
    lines = []
    for key, (kind, _) in _SCHEMA.items():
        v = cfg.values[key]
        if kind == "shape":
            raw = "" if v is None else "x".join(str(d) for d in v)
        elif kind == "layers":
            raw = "" if v is None else format_layer_tokens(v)
        elif kind == "overrides":
            raw = _format_overrides(v)
        elif kind == "intlist":
            raw = ",".join(str(i) for i in v)
        elif kind == "bool":
            raw = "true" if v else "false"
        elif kind == "optint":
            raw = "none" if v is None else str(v)
        elif kind == "float":
            raw = repr(float(v))
        else:
            raw = str(v)
        if v is None and kind in ("shape", "layers"):
            continue
        lines.append(f"{key} = {raw}")
    return "\n".join(lines) + "\n"

"""Teacher training: seeded SGD with momentum over the quantized forward graph,
plus the shared evaluation metrics.

Master weights stay full precision; the forward pass quantizes them on the
fly and gradients reach the masters through the straight-through estimator.
Freezing at the end quantizes the masters once onto the weight grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, to_real
from .errors import ConfigError, NumericError, TrainingError
from .layers import NetworkSpec, TeacherNet, build_teacher
from .runtime import IntegerModel, infer
from .tensor import IntTensor


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 64
    lr: float = 0.1
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 1

    def __post_init__(self):
        self.lr_decay_epochs = tuple(self.lr_decay_epochs)
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2 (batch norm needs statistics)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ConfigError("learning rate must be positive and momentum in [0,1)")


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient wrt logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = (np.exp(logp) - np.eye(logits.shape[1])[labels]) / n
    return loss, grad


def topk_order(logits: np.ndarray) -> np.ndarray:
    """Class indices sorted by descending score; equal scores break toward the
    lowest class index."""
    return np.argsort(-logits, axis=1, kind="stable")


def train_teacher(spec: NetworkSpec, data: Dataset, cfg: TrainConfig) -> TeacherNet:
    """Train the BN-enabled quantized teacher from scratch.

    Deterministic given cfg.seed: initialization and shuffling come from one
    seeded generator and the kernels are order-fixed."""
    sample = data.images.shape[1:]
    if sample != tuple(spec.input_shape) and (
        len(spec.input_shape) != 1 or int(np.prod(sample)) != spec.input_shape[0]
    ):
        raise ConfigError(
            f"dataset samples {sample} do not match network input {spec.input_shape}"
        )
    rng = np.random.default_rng(cfg.seed)
    net = build_teacher(spec, rng)
    velocity = {}
    history = []
    n = len(data)
    lr = cfg.lr
    for epoch in range(cfg.epochs):
        if epoch in cfg.lr_decay_epochs:
            lr *= cfg.lr_decay_factor
        perm = rng.permutation(n)
        losses = []
        correct = 0
        seen = 0
        for lo in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            x = to_real(data.images[idx])
            y = data.labels[idx]
            try:
                res = net.forward(x, training=True)
                loss, dlogits = softmax_cross_entropy(res.output, y)
                if not np.isfinite(loss):
                    raise NumericError("loss left the reals")
                grads = net.backward(dlogits, res.caches)
            except NumericError as err:
                raise TrainingError(
                    f"training diverged at epoch {epoch}: {err}", epoch=epoch
                ) from err
            for key, g in grads.items():
                layer_idx, name = key
                p = net.layers[layer_idx].params()[name]
                if name == "w" and cfg.weight_decay:
                    g = g + cfg.weight_decay * p
                v = velocity.get(key)
                if v is None:
                    v = np.zeros_like(p)
                    velocity[key] = v
                v *= cfg.momentum
                v -= lr * g
                p += v
            losses.append(loss)
            correct += int((topk_order(res.output)[:, 0] == y).sum())
            seen += len(y)
        history.append(float(np.mean(losses)))
    net.freeze_weights()
    net.meta = {
        "train_loss_history": history,
        "final_train_accuracy": correct / max(seen, 1),
    }
    return net


def evaluate(model, data: Dataset, batch_size: int = 512,
             mode: str = "exact_rational") -> dict:
    """Top-1/top-5 error and loss for a network or an exported integer model.

    Ties in the logits resolve toward the lowest class index, so the metrics
    are deterministic for any model."""
    if isinstance(model, IntegerModel):
        scale = float(model.logit_scale())
        forward = lambda x: infer(
            model, IntTensor(x, bits=model.input_bits), mode=mode
        ).data.astype(np.float64) * scale
        feed = lambda imgs: imgs.astype(np.int64)
    else:
        forward = lambda x: model.forward(x).output
        feed = to_real
    n = len(data)
    k = min(5, data.classes)
    top1_err = 0
    topk_err = 0
    total_loss = 0.0
    for lo in range(0, n, batch_size):
        x = feed(data.images[lo : lo + batch_size])
        y = data.labels[lo : lo + batch_size]
        logits = forward(x)
        order = topk_order(logits)
        top1_err += int((order[:, 0] != y).sum())
        topk_err += int((order[:, :k] != y[:, None]).all(axis=1).sum())
        loss, _ = softmax_cross_entropy(logits, y)
        total_loss += loss * len(y)
    return {
        "top1_error": top1_err / n,
        "top5_error": topk_err / n,
        "loss": total_loss / n,
    }

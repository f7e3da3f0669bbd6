"""Progressive tandem distillation: turn a BN-enabled quantized teacher into a
BN-free integer student.

Stage 1 walks the blocks once, fitting each block's integer scale factor so
that scale * (student pre-scale activation) best matches the teacher's
post-batch-norm activation in least squares, over a small seeded calibration
sample fed through the teacher. The student starts from the teacher's
quantized weights, so the pre-scale activation is the teacher's own pre-BN
signal unless optional stage-1 weight steps move it.

Stage 2 then trains one block at a time against the teacher's quantized block
output, earlier blocks frozen. The block's input comes either from the
teacher's frozen activations (default) or from the student's own frozen
prefix, selectable per config. Each block freezes onto the weight grid before
the next one starts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, to_real
from .errors import ConfigError, DimensionError, StageError, StateError
from .layers import (
    ScaleLayer,
    StudentNet,
    TeacherNet,
    build_student_from_teacher,
    validate_duality,
)
from .quantize import ScaleFactor

INPUT_SOURCES = ("teacher_prefix", "student_prefix")


@dataclass
class DistillConfig:
    stage1_batches: int = 8
    stage1_weight_steps: int = 0
    stage1_lr: float = 0.01
    stage2_epochs: int = 4
    stage2_lr: float = 0.05
    stage2_momentum: float = 0.9
    batch_size: int = 64
    input_source: str = "teacher_prefix"
    threshold: float = 1e-3
    patience: int = 2
    samples: int | None = None  # stage-2 subset size; full training set if None
    seed: int = 7

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.threshold <= 0:
            raise ConfigError("convergence threshold must be > 0")
        if self.input_source not in INPUT_SOURCES:
            raise ConfigError(
                f"input_source must be one of {INPUT_SOURCES}, got {self.input_source!r}"
            )


@dataclass
class StageReport:
    """Outcome of one stage at one block."""

    layer: int
    final_loss: float
    alpha: int | None
    epochs_used: int
    trajectory: list[float] = field(default_factory=list)
    stage: int = 1
    degenerate: bool = False

    def __post_init__(self):
        if self.final_loss < 0:
            raise ConfigError("local loss cannot be negative")


def _fit_alpha_sums(ts: float, ss: float, tt: float):
    """Integer alpha minimizing tt - 2*a*ts + a^2*ss, clamped to >= 1.

    Returns (alpha, loss_at_alpha, degenerate). Ties go to the smaller alpha."""
    if ss == 0.0:
        return 1, tt, True
    star = ts / ss
    lo = max(1, int(np.floor(star)))
    hi = max(1, int(np.ceil(star)))
    loss = lambda a: tt - 2.0 * a * ts + float(a) * a * ss
    best = lo if loss(lo) <= loss(hi) else hi
    return best, max(loss(best), 0.0), False


def fit_alpha(teacher_act: np.ndarray, student_act: np.ndarray) -> ScaleFactor:
    """Least-squares integer scale matching teacher_act ~ alpha * student_act."""
    t = np.asarray(teacher_act, dtype=np.float64).ravel()
    s = np.asarray(student_act, dtype=np.float64).ravel()
    if t.shape != s.shape:
        raise DimensionError(f"activation shapes differ: {t.shape} vs {s.shape}")
    alpha, _, _ = _fit_alpha_sums(float(t @ s), float(s @ s), float(t @ t))
    return ScaleFactor(alpha)


def _calibration_indices(n: int, cfg: DistillConfig, rng: np.random.Generator):
    want = min(n, cfg.stage1_batches * cfg.batch_size)
    return rng.choice(n, size=want, replace=False)


def stage1_init(
    teacher: TeacherNet, student: StudentNet, data: Dataset, cfg: DistillConfig
) -> list[StageReport]:
    """Fit and permanently freeze every block's integer scale factor.

    Both networks see the teacher's local activations: each block's input is
    the teacher's previous-block output on the calibration sample."""
    if not teacher.fully_frozen:
        raise StateError("teacher must be trained and frozen before stage 1")
    rng = np.random.default_rng([cfg.seed, 1])
    idx = _calibration_indices(len(data), cfg, rng)
    nblocks = len(teacher.blocks)

    # teacher pass over the calibration sample: block inputs and post-BN targets
    inputs = [[] for _ in range(nblocks)]
    targets = [[] for _ in range(nblocks)]
    for lo in range(0, len(idx), cfg.batch_size):
        x = teacher.prepare_input(to_real(data.images[idx[lo : lo + cfg.batch_size]]))
        res = teacher.forward(x, want_taps=True)
        for b, tap in enumerate(res.taps):
            inputs[b].append(x if b == 0 else res.taps[b - 1].output)
            targets[b].append(tap.post_norm)
    inputs = [np.concatenate(v) for v in inputs]
    targets = [np.concatenate(v) for v in targets]

    reports = []
    for b in range(nblocks):
        start, end = student.blocks[b]
        op = student.layers[start]
        scale_layer = next(
            (l for l in student.layers[start:end] if isinstance(l, ScaleLayer)), None
        )
        t = targets[b].ravel()
        s_act, _ = op.forward(inputs[b], training=False)
        s = s_act.ravel()
        if scale_layer is None:
            residual = float(np.mean((t - s) ** 2))
            reports.append(StageReport(layer=b, final_loss=residual, alpha=None,
                                       epochs_used=0, trajectory=[residual], stage=1))
            continue
        alpha, sse, degenerate = _fit_alpha_sums(
            float(t @ s), float(s @ s), float(t @ t)
        )
        trajectory = [sse / t.size]
        for _ in range(cfg.stage1_weight_steps):
            s_act, caches = op.forward(inputs[b], training=True)
            diff = alpha * s_act - targets[b]
            grad = 2.0 * alpha * diff / diff.size
            _, pgrads = op.backward(grad, caches)
            op.w -= cfg.stage1_lr * pgrads["w"]
            trajectory.append(float(np.mean(diff**2)))
        scale_layer.alpha = alpha  # fixed permanently from here on
        reports.append(StageReport(
            layer=b, final_loss=trajectory[-1], alpha=alpha,
            epochs_used=cfg.stage1_weight_steps, trajectory=trajectory,
            stage=1, degenerate=degenerate,
        ))
    return reports


def _block_alpha(student: StudentNet, b: int) -> int | None:
    start, end = student.blocks[b]
    for layer in student.layers[start:end]:
        if isinstance(layer, ScaleLayer):
            if layer.alpha is None:
                raise StateError(f"block {b}: scale factor unset, run stage 1 first")
            return int(layer.alpha)
    return None


def _block_grid(net, b: int) -> int | None:
    """Output grid steps of block b, or None when the output is unquantized."""
    from .layers import Clip01Layer
    from .quantize import levels

    start, end = net.blocks[b]
    for layer in net.layers[start:end]:
        if isinstance(layer, Clip01Layer) and layer.quantize:
            return levels(layer.abits)
    return None


class _SignalCache:
    """Frozen per-stage signals, stored as codes when they sit on a grid.

    Reconstruction divides by the same grid constant the forward pass used,
    so cached batches are bit-identical to recomputed ones."""

    def __init__(self, value: np.ndarray, grid: int | None):
        if grid is not None and grid <= 255:
            self.codes = np.round(value * grid).astype(np.uint8)
            self.grid = grid
        else:
            self.codes = value
            self.grid = None

    def batch(self, idx) -> np.ndarray:
        part = self.codes[idx]
        if self.grid is None:
            return part
        return part.astype(np.float64) / self.grid


def _stage2_signals(i, teacher, student, data, cfg, pool):
    """Layer-i inputs and targets over the pool, computed once per stage.

    Everything upstream of block i is frozen during the stage, so both
    signals are constants of the stage."""
    xins, tgts = [], []
    for lo in range(0, len(pool), cfg.batch_size):
        sel = pool[lo : lo + cfg.batch_size]
        x = teacher.prepare_input(to_real(data.images[sel]))
        tres = teacher.forward(x, upto_block=i, want_taps=True)
        tgts.append(tres.taps[i].output)
        if i == 0:
            xins.append(x)
        elif cfg.input_source == "teacher_prefix":
            xins.append(tres.taps[i - 1].output)
        else:
            xins.append(student.forward(x, upto_block=i - 1).output)
    in_grid = 255 if i == 0 else _block_grid(teacher, i - 1)
    return (
        _SignalCache(np.concatenate(xins), in_grid),
        _SignalCache(np.concatenate(tgts), _block_grid(teacher, i)),
    )


def stage2_train_layer(
    i: int, teacher: TeacherNet, student: StudentNet, data: Dataset,
    cfg: DistillConfig,
) -> StageReport:
    """Train block i against the teacher's block-i output, then freeze it."""
    for b in range(i):
        if not student.layers[student.blocks[b][0]].frozen:
            raise StateError(f"block {b} must be frozen before training block {i}")
    alpha = _block_alpha(student, i)
    op = student.layers[student.blocks[i][0]]
    prefix_before = student.weight_checksum(upto_block=i)

    rng = np.random.default_rng([cfg.seed, 2, i])
    n = len(data)
    if cfg.samples is not None and cfg.samples < n:
        pool = rng.choice(n, size=cfg.samples, replace=False)
    else:
        pool = np.arange(n)
    xin_cache, tgt_cache = _stage2_signals(i, teacher, student, data, cfg, pool)
    velocity = np.zeros_like(op.w)
    history: list[float] = []
    stall = 0
    epochs_used = 0
    for epoch in range(cfg.stage2_epochs):
        perm = rng.permutation(len(pool))
        batch_losses = []
        for lo in range(0, len(pool) - cfg.batch_size + 1, cfg.batch_size):
            sel = perm[lo : lo + cfg.batch_size]
            target = tgt_cache.batch(sel)
            x_in = xin_cache.batch(sel)
            y, caches = student.forward_block(i, x_in, training=True)
            diff = y - target
            loss = float(np.mean(diff**2))
            if not np.isfinite(loss):
                raise StageError(f"stage-2 loss diverged at block {i}", layer=i)
            wgrad, _ = student.backward_block(i, 2.0 * diff / diff.size, caches)
            velocity *= cfg.stage2_momentum
            velocity -= cfg.stage2_lr * wgrad
            op.w += velocity
            batch_losses.append(loss)
        epoch_loss = float(np.mean(batch_losses)) if batch_losses else 0.0
        history.append(epoch_loss)
        epochs_used = epoch + 1
        if len(history) > 1:
            prev = history[-2]
            improved = (prev - epoch_loss) / max(prev, 1e-30)
            stall = stall + 1 if improved < cfg.threshold else 0
            if stall >= cfg.patience:
                break
    op.freeze()
    if student.weight_checksum(upto_block=i) != prefix_before:
        raise StageError(f"frozen prefix changed while training block {i}", layer=i)
    final = history[-1] if history else 0.0
    return StageReport(layer=i, final_loss=final, alpha=alpha,
                       epochs_used=epochs_used, trajectory=history, stage=2)


def run_distillation(
    teacher: TeacherNet, spec, data: Dataset, cfg: DistillConfig
):
    """Full pipeline: stage-1 scale initialization, stage-2 per-block tandem
    training, and the final freeze. Returns (student, reports)."""
    if not teacher.fully_frozen:
        raise StateError("teacher must be frozen before distillation")
    if spec is not None:
        validate_duality(spec, spec.student_spec())
        if [l.kind for l in spec.layers] != [l.kind for l in teacher.spec.layers]:
            raise ConfigError("spec does not describe the given teacher")
    student = build_student_from_teacher(teacher)
    reports = stage1_init(teacher, student, data, cfg)
    for i in range(len(student.blocks)):
        try:
            reports.append(stage2_train_layer(i, teacher, student, data, cfg))
        except StageError as err:
            err.stage_reports = reports
            raise
    assert student.fully_frozen
    return student, reports


def write_report_file(path, reports: list[StageReport]) -> None:
    """One record per report, tab-separated, fields in declaration order."""
    with open(path, "w") as fh:
        fh.write("stage\tlayer\tfinal_loss\talpha\tepochs_used\ttrajectory\n")
        for r in reports:
            traj = ",".join(f"{v:.9g}" for v in r.trajectory)
            alpha = "-" if r.alpha is None else str(r.alpha)
            flag = "\tdegenerate" if r.degenerate else ""
            fh.write(
                f"{r.stage}\t{r.layer}\t{r.final_loss:.9g}\t{alpha}\t"
                f"{r.epochs_used}\t{traj}{flag}\n"
            )

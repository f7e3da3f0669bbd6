"""Command-line entry point.

Subcommands map one-to-one onto the library operations: train-teacher,
distill, export, infer, evaluate, verify, plus make-data which generates the
synthetic digit corpus as IDX files. Every artifact-producing subcommand
archives the resolved configuration and seed beside its outputs.

Exit codes: 0 success, 2 configuration, 3 data/format, 4 training, 5 verify.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import modelfile
from .config import RunConfig, format_config, load_config
from .data import Dataset, ingest_cifar, ingest_idx, write_synthetic_idx
from .distill import run_distillation, write_report_file
from .errors import (
    ConfigError,
    FiqnnError,
    FormatError,
    NumericError,
    RangeError,
    StageError,
    TrainingError,
    VerificationError,
)
from .layers import StudentNet, TeacherNet
from .runtime import IntegerModel, IntTensor, export, infer, write_trace
from .training import evaluate, topk_order, train_teacher
from .verify import require_all, verify_model

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4
EXIT_VERIFY = 5


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.values["seed"] = args.seed
    if getattr(args, "stage2_input", None):
        cfg.values["distill.input_source"] = args.stage2_input
    return cfg


def _archive_config(cfg: RunConfig, out: Path) -> None:
    (out / "resolved.cfg").write_text(format_config(cfg))


def _load_dataset(cfg: RunConfig, split: str) -> Dataset:
    fmt = cfg.values["data.format"]
    images, labels = cfg.data_paths(split)
    if fmt == "idx":
        return ingest_idx(images, labels, classes=cfg.values["net.classes"],
                          split=split)
    return ingest_cifar([p for p in images.split(",") if p],
                        classes=cfg.values["net.classes"], split=split)


def _write_metrics(metrics: dict, out: Path, name: str = "metrics.txt") -> None:
    width = max(len(k) for k in metrics)
    print(f"{'metric'.ljust(width)}  value")
    for k, v in metrics.items():
        print(f"{k.ljust(width)}  {v:.6f}")
    with open(out / name, "w") as fh:
        for k, v in metrics.items():
            fh.write(f"{k}\t{v:.10g}\n")


def cmd_make_data(args) -> int:
    out = _out_dir(args)
    paths = write_synthetic_idx(out, args.train, args.test, args.seed or 1)
    for k, v in paths.items():
        print(f"{k}\t{v}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    _archive_config(cfg, out)
    data = _load_dataset(cfg, "train")
    teacher = train_teacher(cfg.network_spec(), data, cfg.train_config())
    path = out / "teacher.fiqn"
    modelfile.save(teacher, path)
    metrics = {"final_train_accuracy": teacher.meta["final_train_accuracy"]}
    try:
        test = _load_dataset(cfg, "test")
    except ConfigError:
        test = None
    if test is not None:
        m = evaluate(teacher, test)
        metrics.update({f"test_{k}": v for k, v in m.items()})
    _write_metrics(metrics, out)
    print(f"teacher checkpoint written to {path}")
    return 0


def cmd_distill(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    _archive_config(cfg, out)
    teacher = modelfile.load(args.teacher)
    if not isinstance(teacher, TeacherNet):
        raise FormatError(f"{args.teacher} is not a teacher checkpoint")
    data = _load_dataset(cfg, "train")
    student, reports = run_distillation(
        teacher, cfg.network_spec(), data, cfg.distill_config()
    )
    path = out / "student.fiqn"
    modelfile.save(student, path)
    write_report_file(out / "stage_reports.txt", reports)
    print(f"student checkpoint written to {path}")
    print(f"{len(reports)} stage reports written to {out / 'stage_reports.txt'}")
    return 0


def cmd_export(args) -> int:
    out = _out_dir(args)
    student = modelfile.load(args.student)
    if not isinstance(student, StudentNet):
        raise FormatError(f"{args.student} is not a student checkpoint")
    model = export(student)
    path = out / "model.fiqn"
    modelfile.save(model, path)
    print(f"integer model written to {path}")
    return 0


def cmd_infer(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    model = modelfile.load_integer_model(args.model)
    data = _load_dataset(cfg, args.split)
    codes = data.images.astype(np.int64)
    if args.limit:
        codes = codes[: args.limit]
    trace: list | None = [] if args.trace else None
    logits = infer(model, IntTensor(codes, bits=model.input_bits),
                   mode=args.mode, trace=trace)
    preds = topk_order(logits.data)[:, 0]
    pred_path = out / "predictions.txt"
    with open(pred_path, "w") as fh:
        for i, p in enumerate(preds):
            fh.write(f"{i}\t{int(p)}\n")
    if trace is not None:
        write_trace(out / "trace.txt", trace)
        print(f"trace written to {out / 'trace.txt'}")
    print(f"{len(preds)} predictions written to {pred_path}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    model = modelfile.load(args.model)
    data = _load_dataset(cfg, args.split)
    metrics = evaluate(model, data, mode=args.mode)
    _write_metrics(metrics, out)
    return 0


def cmd_verify(args) -> int:
    cfg = _load_run_config(args)
    model = modelfile.load_integer_model(args.model)
    data = _load_dataset(cfg, args.split)
    results = verify_model(model, data, model_path=args.model,
                           samples=args.samples)
    for r in results:
        print(r.line())
    require_all(results)
    print("verify: all checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fiqnn",
        description="BatchNorm-free fully-integer quantized networks "
                    "via progressive tandem distillation",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, seed=True, out=True):
        if config:
            sp.add_argument("--config", required=True, help="run configuration file")
        if seed:
            sp.add_argument("--seed", type=int, default=None,
                            help="override the configured seed")
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("make-data", help="generate a synthetic digit corpus")
    sp.add_argument("--train", type=int, default=20000)
    sp.add_argument("--test", type=int, default=10000)
    common(sp, config=False)
    sp.set_defaults(func=cmd_make_data)

    sp = sub.add_parser("train-teacher", help="train the BN-enabled teacher")
    common(sp)
    sp.set_defaults(func=cmd_train_teacher)

    sp = sub.add_parser("distill", help="run the tandem distillation pipeline")
    common(sp)
    sp.add_argument("--teacher", required=True, help="teacher checkpoint")
    sp.add_argument("--stage2-input", choices=("teacher_prefix", "student_prefix"),
                    default=None, help="stage-2 layer input source")
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("export", help="fold a student into an integer model")
    sp.add_argument("--student", required=True, help="student checkpoint")
    common(sp, config=False, seed=False)
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("infer", help="integer-only inference")
    common(sp)
    sp.add_argument("--model", required=True, help="integer model file")
    sp.add_argument("--split", choices=("train", "test"), default="test")
    sp.add_argument("--mode", choices=("exact_rational", "multiply_shift"),
                    default="multiply_shift")
    sp.add_argument("--trace", action="store_true",
                    help="write the per-layer conformance trace")
    sp.add_argument("--limit", type=int, default=0, help="sample cap (0 = all)")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("evaluate", help="top-1/top-5 error and loss")
    common(sp)
    sp.add_argument("--model", required=True, help="any .fiqn model file")
    sp.add_argument("--split", choices=("train", "test"), default="test")
    sp.add_argument("--mode", choices=("exact_rational", "multiply_shift"),
                    default="exact_rational")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("verify", help="equivalence suites and no-float audit")
    common(sp, out=False)
    sp.add_argument("--model", required=True, help="integer model file")
    sp.add_argument("--split", choices=("train", "test"), default="test")
    sp.add_argument("--samples", type=int, default=None,
                    help="sample cap for the equivalence sweep")
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, RangeError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, StageError, NumericError) as err:
        print(f"training error: {err}", file=sys.stderr)
        return EXIT_TRAINING
    except VerificationError as err:
        print(f"verification failed: {err}", file=sys.stderr)
        return EXIT_VERIFY
    except FiqnnError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

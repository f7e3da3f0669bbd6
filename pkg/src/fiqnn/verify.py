"""Equivalence and audit suites for exported integer models.

Checks, in order:
  * exact-rational inference reproduces the reference student code for code
    at every layer and matches its argmax on every sample;
  * multiply-shift inference stays within one code unit of exact-rational
    per element and moves the argmax on at most 0.1% of samples;
  * the inference path touches no floating-point values after the input
    boundary (dtype trap over every kernel invocation);
  * the model file round-trips byte-identically.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import VerificationError
from .quantize import levels
from .runtime import (
    ConvRecord,
    DenseRecord,
    IntegerModel,
    infer,
    rebuild_student,
    reference_record_outputs,
)
from .tensor import FloatTrap, IntTensor
from .training import topk_order

ARGMAX_DRIFT_BUDGET = 1e-3  # multiply-shift may move at most this fraction


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def _record_kinds(model: IntegerModel):
    """Per record: 'codes' when the output is activation codes, 'logits' for
    the final accumulator."""
    kinds = []
    ops = [r for r in model.records if isinstance(r, (ConvRecord, DenseRecord))]
    last_op = ops[-1]
    code_bits = None
    for rec in model.records:
        if isinstance(rec, (ConvRecord, DenseRecord)):
            if rec is last_op and rec.requant is None:
                code_bits = None
                kinds.append(("logits", None))
            else:
                code_bits = rec.requant.out_bits
                kinds.append(("codes", code_bits))
        else:
            kinds.append(("codes", code_bits) if code_bits else ("logits", None))
    return kinds


def run_equivalence(
    model: IntegerModel, data: Dataset, samples: int | None = None,
    batch_size: int = 256,
) -> list[CheckResult]:
    """Reference-vs-exact and exact-vs-multiply-shift sweeps over a dataset."""
    student = rebuild_student(model)
    kinds = _record_kinds(model)
    n = len(data) if samples is None else min(samples, len(data))

    ref_mismatch = 0
    argmax_ref_mismatch = 0
    argmax_ties = 0
    ms_max_dev = 0
    ms_argmax_moves = 0
    for lo in range(0, n, batch_size):
        codes = data.images[lo : lo + batch_size].astype(np.int64)
        x = IntTensor(codes, bits=model.input_bits)
        trace_exact: list = []
        logits_exact = infer(model, x, mode="exact_rational", trace=trace_exact)
        trace_ms: list = []
        logits_ms = infer(model, x, mode="multiply_shift", trace=trace_ms)
        refs = reference_record_outputs(student, codes, model.input_bits)
        for (kind, bits), (_, _, got), ref in zip(kinds, trace_exact, refs):
            if kind == "codes":
                dequant = got.astype(np.float64) / levels(bits)
                ref_mismatch += int((dequant != ref).sum())
        pred_ref = topk_order(refs[-1])[:, 0]
        pred_exact = topk_order(logits_exact.data)[:, 0]
        for row in np.flatnonzero(pred_ref != pred_exact):
            # exact rational ties make the float-path argmax arbitrary; only
            # a genuine value gap counts as a mismatch
            a = logits_exact.data[row, pred_ref[row]]
            b = logits_exact.data[row, pred_exact[row]]
            if a == b:
                argmax_ties += 1
            else:
                argmax_ref_mismatch += 1
        for (kind, _), (_, _, a), (_, _, b) in zip(kinds, trace_exact, trace_ms):
            if kind == "codes":
                ms_max_dev = max(ms_max_dev, int(np.abs(a - b).max()))
        pred_ms = topk_order(logits_ms.data)[:, 0]
        ms_argmax_moves += int((pred_exact != pred_ms).sum())

    results = [
        CheckResult(
            "exact-rational activations equal reference",
            ref_mismatch == 0,
            f"{ref_mismatch} mismatched elements over {n} samples",
        ),
        CheckResult(
            "exact-rational argmax equals reference",
            argmax_ref_mismatch == 0,
            f"{argmax_ref_mismatch}/{n} predictions differ"
            + (f" ({argmax_ties} exact ties)" if argmax_ties else ""),
        ),
        CheckResult(
            "multiply-shift within one code of exact",
            ms_max_dev <= 1,
            f"max per-element deviation {ms_max_dev}",
        ),
        CheckResult(
            "multiply-shift argmax drift within budget",
            ms_argmax_moves <= ARGMAX_DRIFT_BUDGET * n,
            f"{ms_argmax_moves}/{n} predictions moved "
            f"(budget {ARGMAX_DRIFT_BUDGET:.1%})",
        ),
    ]
    return results


def run_float_audit(model: IntegerModel, data: Dataset,
                    samples: int = 256) -> CheckResult:
    """Run inference with the dtype trap armed; report float-typed operations."""
    trap = FloatTrap()
    codes = data.images[:samples].astype(np.int64)
    for mode in ("exact_rational", "multiply_shift"):
        infer(model, IntTensor(codes, bits=model.input_bits), mode=mode, trap=trap)
    weight_floats = sum(
        1 for r in model.records
        if isinstance(r, (ConvRecord, DenseRecord))
        and r.weights.data.dtype.kind == "f"
    )
    total = trap.float_ops + weight_floats
    detail = f"{total} float ops after input boundary ({trap.int_ops} integer ops)"
    if trap.float_sites:
        detail += f"; first site {trap.float_sites[0]}"
    return CheckResult("no-float audit", total == 0, detail)


def run_roundtrip(path) -> CheckResult:
    """Byte-identity of load followed by re-serialization."""
    from . import modelfile

    raw = Path(path).read_bytes()
    again = modelfile.serialize(modelfile.loads(raw))
    return CheckResult(
        "model file round-trip",
        again == raw,
        "byte-identical" if again == raw else
        f"re-serialization differs ({len(raw)} vs {len(again)} bytes)",
    )


def verify_model(model: IntegerModel, data: Dataset, model_path=None,
                 samples: int | None = None) -> list[CheckResult]:
    results = run_equivalence(model, data, samples=samples)
    results.append(run_float_audit(model, data))
    if model_path is not None:
        results.append(run_roundtrip(model_path))
    return results


def require_all(results: list[CheckResult]) -> None:
    failed = [r for r in results if not r.passed]
    if failed:
        raise VerificationError(
            "; ".join(f"{r.name}: {r.detail}" for r in failed)
        )

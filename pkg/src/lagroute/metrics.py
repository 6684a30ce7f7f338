"""Scoring and cost accounting for routed-adapter evaluation.

Two independent pieces live here. The normalized task score aggregates
per-dataset metric values into a single percentage per task, weighting each
dataset by its sample count and dividing by a reference model's score. The
cost model gives closed-form disk, device best-case, and per-token FLOP
figures for the three routing methods (arrow, spectr, lag), and a checker
that compares an instrumented RouteTrace against those figures.

Multiply-add counts as 2 FLOPs throughout.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

from lagroute.router import RouteTrace

_METHODS = ("arrow", "spectr", "lag")

# The closed forms drop lower-order terms (candidate norms, the single
# applied delta), so instrumented counts sit slightly above them.
FLOP_CHECK_TOLERANCE = 0.05


@dataclass(frozen=True)
class DatasetScore:
    """One dataset's metric value and reference value within a task."""

    dataset: str
    task: str
    size: int
    score: float
    reference: float

    def __post_init__(self) -> None:
        if self.size < 1:
            raise ValueError(f"dataset {self.dataset!r}: size must be >= 1, got {self.size}")
        if not math.isfinite(self.score):
            raise ValueError(f"dataset {self.dataset!r}: score must be finite")
        if not (math.isfinite(self.reference) and self.reference > 0):
            raise ValueError(f"dataset {self.dataset!r}: reference must be positive and finite")


def normalized_task_score(scores: Sequence[DatasetScore]) -> float:
    """Size-weighted mean of score/reference ratios over one task, times 100.

    Exactly 100.0 when every dataset matches its reference.
    """
    scores = list(scores)
    if not scores:
        raise ValueError("at least one dataset score is required")
    tasks = {s.task for s in scores}
    if len(tasks) != 1:
        raise ValueError(f"scores span multiple tasks {sorted(tasks)}; pass one task at a time")
    total = sum(s.size for s in scores)
    weighted = sum(s.size * (s.score / s.reference) for s in scores)
    return 100.0 * weighted / total


def score_tasks(scores: Sequence[DatasetScore]) -> dict[str, float]:
    """Group dataset scores by task and compute each task's normalized score."""
    by_task: dict[str, list[DatasetScore]] = {}
    for s in scores:
        by_task.setdefault(s.task, []).append(s)
    return {task: normalized_task_score(group) for task, group in sorted(by_task.items())}


def average_tasks(scores: Sequence[DatasetScore], weighted: bool = False) -> float:
    """Average of per-task normalized scores.

    Unweighted by default; weighted=True weights each task by its total
    sample count instead.
    """
    per_task = score_tasks(scores)
    if not weighted:
        return sum(per_task.values()) / len(per_task)
    sizes = {task: 0 for task in per_task}
    for s in scores:
        sizes[s.task] += s.size
    total = sum(sizes.values())
    return sum(per_task[task] * sizes[task] for task in per_task) / total


def read_dataset_scores(path) -> list[DatasetScore]:
    """Load DatasetScore rows from a CSV with columns dataset, task, size, score, reference."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"dataset", "task", "size", "score", "reference"}
        fields = set(reader.fieldnames or ())
        if not required <= fields:
            raise ValueError(f"score CSV missing columns {sorted(required - fields)}")
        rows = []
        for row in reader:
            rows.append(
                DatasetScore(
                    dataset=row["dataset"].strip(),
                    task=row["task"].strip(),
                    size=int(row["size"]),
                    score=float(row["score"]),
                    reference=float(row["reference"]),
                )
            )
    if not rows:
        raise ValueError("score CSV contains no data rows")
    return rows


@dataclass(frozen=True)
class MethodCost:
    """Cost figures for one routing method at fixed (n, h, r, k)."""

    disk_params: int
    gpu_best_params: int
    flops_per_token: int

    def __post_init__(self) -> None:
        for name in ("disk_params", "gpu_best_params", "flops_per_token"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class CostReport:
    """Closed-form cost figures for all three methods."""

    n: int
    h: int
    r: int
    k: int
    arrow: MethodCost
    spectr: MethodCost
    lag: MethodCost

    def method(self, name: str) -> MethodCost:
        if name not in _METHODS:
            raise ValueError(f"unknown method {name!r}; expected one of {_METHODS}")
        return getattr(self, name)

    def to_json_dict(self) -> dict:
        out: dict = {"n": self.n, "h": self.h, "r": self.r, "k": self.k}
        for name in _METHODS:
            cost = self.method(name)
            out[name] = {
                "disk_params": cost.disk_params,
                "gpu_best_params": cost.gpu_best_params,
                "flops_per_token": cost.flops_per_token,
            }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"

    def format_table(self) -> str:
        header = f"{'method':<8}{'disk_params':>18}{'gpu_best_params':>18}{'flops_per_token':>18}"
        lines = [f"cost model: n={self.n} h={self.h} r={self.r} k={self.k}", header]
        for name in _METHODS:
            cost = self.method(name)
            lines.append(
                f"{name:<8}{cost.disk_params:>18,}{cost.gpu_best_params:>18,}{cost.flops_per_token:>18,}"
            )
        return "\n".join(lines) + "\n"


def cost_model(n: int, h: int, r: int, k: int) -> CostReport:
    """Disk, device best-case, and per-token FLOP figures for each method.

    Arrow stores the aligned factors plus one routing row per adapter and
    only needs the k rerank survivors plus the row matrix resident; spectr
    needs every adapter resident; lag shares arrow's storage profile. k is
    clamped to n with a warning since a filter cannot select more adapters
    than exist.
    """
    for name, value in (("n", n), ("h", h), ("r", r), ("k", k)):
        if int(value) != value or value < 1:
            raise ValueError(f"{name} must be a positive integer, got {value!r}")
    n, h, r, k = int(n), int(h), int(r), int(k)
    if k > n:
        warnings.warn(f"k={k} exceeds n={n}; clamping to n", stacklevel=2)
        k = n
    full = 2 * n * h * r
    row = n * h
    arrow = MethodCost(disk_params=full + row, gpu_best_params=2 * k * h * r + row, flops_per_token=2 * n * h)
    spectr = MethodCost(disk_params=full, gpu_best_params=full, flops_per_token=full)
    lag = MethodCost(
        disk_params=full, gpu_best_params=2 * k * h * r + row, flops_per_token=2 * h * (n + r * k)
    )
    return CostReport(n=n, h=h, r=r, k=k, arrow=arrow, spectr=spectr, lag=lag)


@dataclass(frozen=True)
class FlopCheckReport:
    """Instrumented-vs-closed-form comparison for one routing configuration."""

    counted_per_decision: float
    predicted_per_decision: int
    formula: str
    deviation: float
    tolerance: float
    ok: bool
    decisions: int
    stage_totals: Mapping[str, int]

    def format_discrepancy(self) -> str:
        lines = [
            f"instrumented {self.counted_per_decision:.1f} FLOPs/decision vs "
            f"{self.formula} closed form {self.predicted_per_decision:,} "
            f"(deviation {self.deviation:.2%}, tolerance {self.tolerance:.0%})",
            f"decisions counted: {self.decisions}",
        ]
        for stage, total in self.stage_totals.items():
            lines.append(f"  {stage:<8} {total:>14,} total ({total / self.decisions:.1f}/decision)")
        return "\n".join(lines)


def measured_flops_check(
    trace: RouteTrace, dims: tuple[int, int, int, int], tolerance: float = FLOP_CHECK_TOLERANCE
) -> FlopCheckReport:
    """Compare a trace's per-decision FLOPs against the cost model.

    dims is (n, h, r, k) for the routed library. With k >= n the engine skips
    the arrow filter, so the comparison targets the spectr figure; otherwise
    the lag figure.
    """
    n, h, r, k = dims
    report = cost_model(n, h, r, min(k, n))
    formula = "spectr" if k >= n else "lag"
    predicted = report.method(formula).flops_per_token
    counted = trace.flops_per_decision()
    deviation = abs(counted - predicted) / predicted
    return FlopCheckReport(
        counted_per_decision=counted,
        predicted_per_decision=predicted,
        formula=formula,
        deviation=deviation,
        tolerance=tolerance,
        ok=deviation <= tolerance,
        decisions=len(trace),
        stage_totals={
            "arrow": trace.flops.arrow,
            "project": trace.flops.project,
            "norm": trace.flops.norm,
            "apply": trace.flops.apply,
        },
    )

"""Checkpoint-to-store conversion with the LoRA scaling folded into B.

Trained adapters ship as (A, B) plus a scalar alpha, with the effective
update being (alpha/r) * B @ A. The routing engine works on the bare
product B @ A, so the scale has to be folded into one factor at export
time; it goes into B, keeping A (whose rows the engine turns into routing
directions) at its trained values. With no alpha given, factors pass
through unscaled.

Per-tensor problems (no matching rule, ambiguous rules, unsupported dtype)
are reported and skipped. Structural problems (an A without its B, two
tensors landing in one slot, shape conflicts, non-finite values) fail the
export, since any store written from such a set would be wrong.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from lagexport.checkpoint import ExportError, TensorInfo, load_tensor, scan_checkpoints
from lagexport.rules import Rule, Slot, resolve
from lagexport.store_writer import LIBRARY_TAGS, RawEntry, write_raw_store

REPORT_NAME = "export_report.json"


@dataclass(frozen=True)
class ExportSpec:
    """What to export: inputs, name rules, destination tag, and scaling."""

    inputs: tuple[str, ...]
    rules: tuple[Rule, ...]
    tag: str
    alpha: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "inputs", tuple(os.fspath(p) for p in self.inputs))
        object.__setattr__(self, "rules", tuple(self.rules))
        if not self.inputs:
            raise ExportError("ExportSpec needs at least one checkpoint path")
        if not self.rules:
            raise ExportError("ExportSpec needs at least one naming rule")
        if self.tag not in LIBRARY_TAGS:
            raise ExportError(f"library tag must be one of {LIBRARY_TAGS}, got {self.tag!r}")
        if self.alpha is not None and not self.alpha > 0:
            raise ExportError(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class ExportedAdapter:
    """Report line for one written adapter."""

    id: str
    layer: str
    m: int
    n: int
    r: int
    scale: float


@dataclass
class ExportReport:
    """Everything the export did: written adapters and skipped tensors."""

    exported: list[ExportedAdapter] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)
    alpha: float | None = None

    def to_json_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "exported": [vars(a) for a in self.exported],
            "skipped": self.skipped,
        }


def _pair_slots(
    matched: list[tuple[TensorInfo, Slot]],
) -> dict[tuple[str, str], dict[str, TensorInfo]]:
    pairs: dict[tuple[str, str], dict[str, TensorInfo]] = {}
    for info, slot in matched:
        key = (slot.adapter, slot.layer)
        roles = pairs.setdefault(key, {})
        if slot.role in roles:
            raise ExportError(
                f"tensors {roles[slot.role].name!r} and {info.name!r} both map to "
                f"role {slot.role} of adapter {slot.adapter!r} at layer {slot.layer!r}"
            )
        roles[slot.role] = info
    return pairs


def export(spec: ExportSpec, out_dir) -> tuple[str, ExportReport]:
    """Convert checkpoints into a raw store; returns (manifest path, report)."""
    report = ExportReport(alpha=spec.alpha)
    matched: list[tuple[TensorInfo, Slot]] = []
    for info in scan_checkpoints(spec.inputs):
        slot, reason = resolve(spec.rules, info.name)
        if reason is not None:
            report.skipped.append({"tensor": info.name, "reason": reason})
            continue
        if not info.supported:
            report.skipped.append(
                {"tensor": info.name, "reason": f"unsupported dtype {info.dtype}"}
            )
            continue
        matched.append((info, slot))

    entries: list[RawEntry] = []
    for (adapter, layer), roles in sorted(_pair_slots(matched).items()):
        missing = {"A", "B"} - set(roles)
        if missing:
            have = next(iter(roles.values())).name
            raise ExportError(
                f"adapter {adapter!r} at layer {layer!r} has {have!r} but no "
                f"role-{missing.pop()} tensor"
            )
        A = load_tensor(roles["A"])
        B = load_tensor(roles["B"])
        adapter_id = f"{adapter}@{layer}"
        if A.ndim != 2 or B.ndim != 2 or A.shape[0] != B.shape[1]:
            raise ExportError(
                f"adapter {adapter_id!r}: shape conflict between "
                f"{roles['A'].name} {A.shape} and {roles['B'].name} {B.shape}"
            )
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ExportError(f"adapter {adapter_id!r}: factors contain non-finite values")
        r = A.shape[0]
        scale = spec.alpha / r if spec.alpha is not None else 1.0
        if scale != 1.0:
            B = B * np.float32(scale)
        entries.append(RawEntry(id=adapter_id, layer=layer, A=A, B=B))
        report.exported.append(
            ExportedAdapter(
                id=adapter_id, layer=layer, m=B.shape[0], n=A.shape[1], r=r, scale=scale
            )
        )

    manifest_path = write_raw_store(out_dir, spec.tag, entries)
    report_path = os.path.join(os.fspath(out_dir), REPORT_NAME)
    tmp = report_path + ".tmp"
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(report.to_json_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")
        os.replace(tmp, report_path)
    except OSError as exc:
        raise ExportError(f"cannot write report {report_path}: {exc}") from exc
    return manifest_path, report

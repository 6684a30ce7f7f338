"""Writer for the routing engine's raw adapter-store directory format.

Deliberately self-contained: the layout below is the public interchange
surface between this tool and the engine, so it is produced from the format
description alone instead of importing the engine.

    <dir>/manifest.json      canonical JSON: sorted keys, 2-space indent,
                             UTF-8, LF, trailing newline
    <dir>/blobs/<stem>.A.f32 little-endian float32, row-major, no header
    <dir>/blobs/<stem>.B.f32

The manifest records format_version 1, the library tag, aligned=false, and
one entry per adapter: id, layer, shape (m, n, r), and the two blob paths.
Blob stems replace filesystem-hostile id characters and take a `~N` suffix
on collision; the recorded paths are authoritative either way.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from lagexport.checkpoint import ExportError

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_DIR = "blobs"
LIBRARY_TAGS = ("task", "knowledge")

_SAFE_CHARS = re.compile(r"[^A-Za-z0-9._@-]")
_KINDS = ("A", "B")


@dataclass(frozen=True)
class RawEntry:
    """One adapter ready to be written: factors already float32 and scaled."""

    id: str
    layer: str
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self) -> None:
        if not self.id or not self.layer:
            raise ExportError("adapter entries need nonempty id and layer")
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[0] != self.B.shape[1]:
            raise ExportError(
                f"adapter {self.id!r}: incompatible factor shapes "
                f"A {self.A.shape} and B {self.B.shape}"
            )

    @property
    def r(self) -> int:
        return self.A.shape[0]


def _blob_stem(adapter_id: str, used: set[str]) -> str:
    base = _SAFE_CHARS.sub("_", adapter_id) or "adapter"
    stem, suffix = base, 0
    while any(f"{stem}.{kind}.f32" in used for kind in _KINDS):
        suffix += 1
        stem = f"{base}~{suffix}"
    used.update(f"{stem}.{kind}.f32" for kind in _KINDS)
    return stem


def write_raw_store(directory, tag: str, entries: Sequence[RawEntry]) -> str:
    """Write a raw library store; returns the manifest path."""
    if tag not in LIBRARY_TAGS:
        raise ExportError(f"library tag must be one of {LIBRARY_TAGS}, got {tag!r}")
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise ExportError("duplicate adapter ids in export set")

    directory = os.fspath(directory)
    try:
        os.makedirs(os.path.join(directory, BLOB_DIR), exist_ok=True)
    except OSError as exc:
        raise ExportError(f"cannot create store directory {directory}: {exc}") from exc

    used: set[str] = set()
    manifest_entries = []
    for entry in entries:
        stem = _blob_stem(entry.id, used)
        blobs = {}
        for kind, matrix in (("A", entry.A), ("B", entry.B)):
            rel = f"{BLOB_DIR}/{stem}.{kind}.f32"
            path = os.path.join(directory, *rel.split("/"))
            try:
                with open(path, "wb") as fh:
                    fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
            except OSError as exc:
                raise ExportError(f"cannot write blob {path}: {exc}") from exc
            blobs[kind] = rel
        manifest_entries.append(
            {
                "id": entry.id,
                "layer": entry.layer,
                "m": int(entry.B.shape[0]),
                "n": int(entry.A.shape[1]),
                "r": int(entry.r),
                "aligned": False,
                "degenerate": False,
                "blobs": blobs,
            }
        )

    manifest = {
        "format_version": FORMAT_VERSION,
        "library_tag": tag,
        "aligned": False,
        "entries": manifest_entries,
    }
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    tmp = manifest_path + ".tmp"
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=2, ensure_ascii=False)
            fh.write("\n")
        os.replace(tmp, manifest_path)
    except OSError as exc:
        raise ExportError(f"cannot write manifest {manifest_path}: {exc}") from exc
    return manifest_path

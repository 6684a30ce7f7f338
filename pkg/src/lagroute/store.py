"""Bit-exact persistence for adapter libraries.

Layout: `manifest.json` plus one raw blob per matrix under `blobs/`. Blobs
are little-endian float32, row-major, no header; the manifest (canonical
JSON: sorted keys, UTF-8, LF) records every entry's shape, blob paths, and,
for aligned entries, its singular values, so consumers in any language can
parse a store with nothing but a JSON reader. A store holds either raw
(A, B) or aligned (A_star, B_star) matrices, never a mix; the top-level
"aligned" flag says which.

Blob names derive from adapter ids with filesystem-hostile characters
replaced; the manifest's recorded relative paths are authoritative, the
naming scheme is just a convention.
"""

from __future__ import annotations

import json
import os
import re
from typing import Iterable, Sequence, Union

import numpy as np

from lagroute.core import (
    LIBRARY_TAGS,
    AdapterLibrary,
    AlignedAdapter,
    LagError,
    RawAdapter,
)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_DIR = "blobs"
ORTHONORMAL_TOLERANCE = 1e-4

_RAW_KINDS = ("A", "B")
_ALIGNED_KINDS = ("A_star", "B_star")
_SAFE_CHARS = re.compile(r"[^A-Za-z0-9._@-]")


class StoreError(LagError):
    """Raised when a library cannot be written."""


class LoadError(StoreError):
    """Raised when a store directory fails validation."""


def _blob_stem(adapter_id: str, used: set[str], kinds: Sequence[str]) -> str:
    base = _SAFE_CHARS.sub("_", adapter_id) or "adapter"
    stem, suffix = base, 0
    while any(f"{stem}.{kind}.f32" in used for kind in kinds):
        suffix += 1
        stem = f"{base}~{suffix}"
    used.update(f"{stem}.{kind}.f32" for kind in kinds)
    return stem


def _write_blob(root: str, rel: str, arr: np.ndarray) -> None:
    path = os.path.join(root, *rel.split("/"))
    try:
        with open(path, "wb") as fh:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    except OSError as exc:
        raise StoreError(f"cannot write blob {path}: {exc}") from exc


def _entry_matrices(adapter: Union[RawAdapter, AlignedAdapter]) -> dict[str, np.ndarray]:
    if isinstance(adapter, AlignedAdapter):
        return {"A_star": adapter.A_star, "B_star": adapter.B_star}
    return {"A": adapter.A, "B": adapter.B}


def save_library(lib, directory, *, tag: str | None = None) -> str:
    """Write an AdapterLibrary (aligned) or RawAdapter list (raw) to directory.

    Returns the manifest path. An empty raw list needs an explicit tag since
    there is nothing to infer it from.
    """
    directory = os.fspath(directory)
    if isinstance(lib, AdapterLibrary):
        aligned = True
        lib_tag = lib.tag
        adapters: list[Union[RawAdapter, AlignedAdapter]] = [
            a for layer in lib.layers for a in lib.adapters(layer)
        ]
    else:
        aligned = False
        adapters = list(lib)
        if any(not isinstance(a, RawAdapter) for a in adapters):
            raise StoreError("raw saves take RawAdapter items; pass an AdapterLibrary for aligned saves")
        tags = {a.library_tag for a in adapters}
        if len(tags) > 1:
            raise StoreError(f"raw adapters span multiple library tags {sorted(tags)}")
        lib_tag = tags.pop() if tags else tag
        if lib_tag is None:
            raise StoreError("empty raw library: pass tag= explicitly")
        if lib_tag not in LIBRARY_TAGS:
            raise StoreError(f"unknown library tag {lib_tag!r}")
        ids = [a.id for a in adapters]
        if len(set(ids)) != len(ids):
            raise StoreError("duplicate adapter ids in raw library")

    try:
        os.makedirs(os.path.join(directory, BLOB_DIR), exist_ok=True)
    except OSError as exc:
        raise StoreError(f"cannot create store directory {directory}: {exc}") from exc

    kinds = _ALIGNED_KINDS if aligned else _RAW_KINDS
    used: set[str] = set()
    entries = []
    for adapter in adapters:
        stem = _blob_stem(adapter.id, used, kinds)
        blobs = {}
        matrices = _entry_matrices(adapter)
        for kind in kinds:
            rel = f"{BLOB_DIR}/{stem}.{kind}.f32"
            _write_blob(directory, rel, matrices[kind])
            blobs[kind] = rel
        if isinstance(adapter, AlignedAdapter):
            entry = {
                "id": adapter.id,
                "layer": adapter.layer,
                "m": adapter.m,
                "n": adapter.n,
                "r": adapter.r_eff,
                "aligned": True,
                "degenerate": adapter.degenerate,
                "blobs": blobs,
                "singular_values": [float(v) for v in adapter.singular_values],
            }
        else:
            entry = {
                "id": adapter.id,
                "layer": adapter.layer,
                "m": adapter.dims.m,
                "n": adapter.dims.n,
                "r": adapter.dims.r,
                "aligned": False,
                "degenerate": False,
                "blobs": blobs,
            }
        entries.append(entry)

    manifest = {
        "format_version": FORMAT_VERSION,
        "library_tag": lib_tag,
        "aligned": aligned,
        "entries": entries,
    }
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    tmp = manifest_path + ".tmp"
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=2, ensure_ascii=False)
            fh.write("\n")
        os.replace(tmp, manifest_path)
    except OSError as exc:
        raise StoreError(f"cannot write manifest {manifest_path}: {exc}") from exc
    return manifest_path


def _manifest_error(entry_id: str, message: str) -> LoadError:
    return LoadError(f"entry {entry_id!r}: {message}")


def _load_blob(root: str, rel, rows: int, cols: int, entry_id: str) -> np.ndarray:
    if not isinstance(rel, str) or rel.startswith("/") or ".." in rel.split("/"):
        raise _manifest_error(entry_id, f"blob path {rel!r} is not a safe relative path")
    path = os.path.join(root, *rel.split("/"))
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise _manifest_error(entry_id, f"cannot read blob {rel}: {exc}") from exc
    expected = rows * cols * 4
    if len(data) != expected:
        raise _manifest_error(entry_id, f"blob {rel} holds {len(data)} bytes, expected {expected}")
    arr = np.frombuffer(data, dtype="<f4").astype(np.float32, copy=False)
    return arr.reshape(rows, cols)


def _require(entry: dict, key: str, entry_id: str):
    if key not in entry:
        raise _manifest_error(entry_id, f"manifest entry missing field {key!r}")
    return entry[key]


def read_manifest(directory) -> dict:
    """Parse a store's manifest.json without loading any blobs."""
    manifest_path = os.path.join(os.fspath(directory), MANIFEST_NAME)
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise LoadError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc


def load_library(directory):
    """Load and validate a store; AdapterLibrary if aligned, else RawAdapter list."""
    directory = os.fspath(directory)
    manifest = read_manifest(directory)

    if manifest.get("format_version") != FORMAT_VERSION:
        raise LoadError(f"unsupported format_version {manifest.get('format_version')!r}, expected {FORMAT_VERSION}")
    tag = manifest.get("library_tag")
    if tag not in LIBRARY_TAGS:
        raise LoadError(f"manifest has unknown library tag {tag!r}")
    aligned = manifest.get("aligned")
    if not isinstance(aligned, bool):
        raise LoadError("manifest missing boolean 'aligned' flag")
    entries = manifest.get("entries")
    if not isinstance(entries, list):
        raise LoadError("manifest 'entries' must be a list")

    seen_ids: set[str] = set()
    raw: list[RawAdapter] = []
    by_layer: dict[str, list[AlignedAdapter]] = {}
    for entry in entries:
        entry_id = str(entry.get("id", "<missing id>"))
        for key in ("id", "layer", "m", "n", "r", "aligned", "blobs"):
            _require(entry, key, entry_id)
        if entry["id"] in seen_ids:
            raise _manifest_error(entry_id, "duplicate adapter id")
        seen_ids.add(entry["id"])
        if bool(entry["aligned"]) != aligned:
            raise _manifest_error(entry_id, f"entry aligned flag disagrees with store-level aligned={aligned}")
        m, n, r = int(entry["m"]), int(entry["n"]), int(entry["r"])
        blobs = entry["blobs"]
        if aligned:
            if entry.get("degenerate") or r == 0:
                raise _manifest_error(entry_id, "degenerate entries cannot join an aligned library")
            for kind in _ALIGNED_KINDS:
                if kind not in blobs:
                    raise _manifest_error(entry_id, f"missing {kind} blob path")
            A_star = _load_blob(directory, blobs["A_star"], r, n, entry_id)
            B_star = _load_blob(directory, blobs["B_star"], m, r, entry_id)
            sv = entry.get("singular_values")
            if not isinstance(sv, list) or len(sv) != r:
                raise _manifest_error(entry_id, f"singular_values must list exactly r={r} values")
            gram = A_star.astype(np.float64) @ A_star.astype(np.float64).T
            if np.abs(gram - np.eye(r)).max() > ORTHONORMAL_TOLERANCE:
                raise _manifest_error(entry_id, "A_star rows are not orthonormal within tolerance")
            try:
                adapter = AlignedAdapter(
                    id=entry["id"],
                    layer=entry["layer"],
                    library_tag=tag,
                    A_star=A_star,
                    B_star=B_star,
                    singular_values=np.asarray(sv, dtype=np.float32),
                )
            except LagError as exc:
                raise _manifest_error(entry_id, str(exc)) from exc
            by_layer.setdefault(entry["layer"], []).append(adapter)
        else:
            for kind in _RAW_KINDS:
                if kind not in blobs:
                    raise _manifest_error(entry_id, f"missing {kind} blob path")
            A = _load_blob(directory, blobs["A"], r, n, entry_id)
            B = _load_blob(directory, blobs["B"], m, r, entry_id)
            try:
                raw.append(
                    RawAdapter(id=entry["id"], layer=entry["layer"], library_tag=tag, A=A, B=B)
                )
            except LagError as exc:
                raise _manifest_error(entry_id, str(exc)) from exc

    if not aligned:
        return raw
    try:
        return AdapterLibrary(tag, by_layer)
    except LagError as exc:
        raise LoadError(f"store does not form a valid library: {exc}") from exc

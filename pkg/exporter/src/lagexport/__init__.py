"""Checkpoint-to-store exporter for the lagroute routing engine."""

from lagexport.checkpoint import (
    SUPPORTED_DTYPES,
    ExportError,
    TensorInfo,
    load_tensor,
    scan_checkpoints,
)
from lagexport.export import ExportedAdapter, ExportReport, ExportSpec, export
from lagexport.rules import Rule, RulesError, Slot, load_rules, resolve
from lagexport.store_writer import (
    BLOB_DIR,
    FORMAT_VERSION,
    LIBRARY_TAGS,
    MANIFEST_NAME,
    RawEntry,
    write_raw_store,
)

__version__ = "0.1.0"

__all__ = [
    "BLOB_DIR",
    "FORMAT_VERSION",
    "LIBRARY_TAGS",
    "MANIFEST_NAME",
    "SUPPORTED_DTYPES",
    "ExportError",
    "ExportReport",
    "ExportSpec",
    "ExportedAdapter",
    "RawEntry",
    "Rule",
    "RulesError",
    "Slot",
    "TensorInfo",
    "export",
    "load_rules",
    "load_tensor",
    "resolve",
    "scan_checkpoints",
    "write_raw_store",
]

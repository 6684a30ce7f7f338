"""Per-tensor access to safetensors checkpoint files.

Each file is a JSON header (dtype, shape, byte offsets per tensor) over one
raw buffer. Access goes through safetensors' lazy slice API so a single
unsupported tensor, say bfloat16 which has no numpy representation, can be
reported and skipped without giving up on the rest of the file.

Float32 tensors pass through bit-for-bit; float16 is widened to float32,
which is exact. Anything else is rejected per tensor with a reason.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from safetensors import safe_open

SUPPORTED_DTYPES = ("F32", "F16")


class ExportError(Exception):
    """Raised when an export cannot produce a valid store."""


@dataclass(frozen=True)
class TensorInfo:
    """Location and metadata of one checkpoint tensor, nothing loaded yet."""

    name: str
    path: str
    dtype: str
    shape: tuple[int, ...]

    @property
    def supported(self) -> bool:
        return self.dtype in SUPPORTED_DTYPES


def scan_checkpoints(paths: Sequence[str]) -> list[TensorInfo]:
    """List every tensor across the given files, in sorted name order.

    The merged namespace must be unambiguous: the same tensor name in two
    files is a hard error, since there is no principled way to pick one.
    """
    if not paths:
        raise ExportError("no checkpoint files given")
    seen: dict[str, str] = {}
    infos: list[TensorInfo] = []
    for path in paths:
        try:
            with safe_open(path, framework="np") as fh:
                for name in fh.keys():
                    if name in seen:
                        raise ExportError(
                            f"tensor {name!r} appears in both {seen[name]} and {path}"
                        )
                    seen[name] = path
                    sl = fh.get_slice(name)
                    infos.append(
                        TensorInfo(
                            name=name,
                            path=path,
                            dtype=sl.get_dtype(),
                            shape=tuple(int(d) for d in sl.get_shape()),
                        )
                    )
        except OSError as exc:
            raise ExportError(f"cannot read checkpoint {path}: {exc}") from exc
        except ExportError:
            raise
        except Exception as exc:
            raise ExportError(f"{path} is not a valid checkpoint: {exc}") from exc
    return sorted(infos, key=lambda info: info.name)


def load_tensor(info: TensorInfo) -> np.ndarray:
    """Load one tensor as float32. Widening from float16 is exact."""
    if not info.supported:
        raise ExportError(
            f"tensor {info.name!r} has unsupported dtype {info.dtype}; "
            f"supported: {', '.join(SUPPORTED_DTYPES)}"
        )
    try:
        with safe_open(info.path, framework="np") as fh:
            tensor = fh.get_tensor(info.name)
    except OSError as exc:
        raise ExportError(f"cannot read checkpoint {info.path}: {exc}") from exc
    return np.ascontiguousarray(tensor, dtype=np.float32)

"""Shared domain types: adapters, libraries, and routing configuration.

All matrices are stored row-major in float32 and frozen (read-only) after
construction, so every type here is safe to share across threads. Scoring
arithmetic elsewhere runs in float32 with float64 accumulation for norms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

TASK = "task"
KNOWLEDGE = "knowledge"
LIBRARY_TAGS = (TASK, KNOWLEDGE)

DEFAULT_TOP_K = 20
DEFAULT_SVD_TOLERANCE = 1e-7
TIE_LOWEST_INDEX = "lowest-index"


class LagError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(LagError, ValueError):
    """A matrix or vector has inconsistent dimensions."""


class NumericError(LagError, ValueError):
    """An input contains NaN or infinite entries."""


class LibraryError(LagError, ValueError):
    """A library is malformed (mixed tags, inconsistent layer widths, bad ids)."""


class RoutingError(LagError, RuntimeError):
    """Routing cannot proceed (empty candidate set, stale cached projection)."""


class CapacityError(LagError, ValueError):
    """Requested benchmark does not fit the orthogonal planting budget."""


def frozen_f32(a: np.ndarray | Sequence) -> np.ndarray:
    """Return `a` as a C-contiguous read-only float32 array."""
    out = np.ascontiguousarray(a, dtype=np.float32)
    if out is a or out.base is not None:
        out = out.copy()
    out.setflags(write=False)
    return out


def as_token_vector(x: np.ndarray | Sequence, n: int | None = None) -> np.ndarray:
    """Validate a single token representation and return it as float32.

    Raises ShapeError on wrong rank/length and NumericError on non-finite
    entries.
    """
    vec = np.asarray(x, dtype=np.float32)
    if vec.ndim != 1:
        raise ShapeError(f"token vector must be 1-D, got shape {vec.shape}")
    if n is not None and vec.shape[0] != n:
        raise ShapeError(f"token vector has length {vec.shape[0]}, expected {n}")
    if not np.all(np.isfinite(vec)):
        raise NumericError("token vector contains non-finite entries")
    return vec


@dataclass(frozen=True)
class Dims:
    """Shapes of one adapter: B is m x r, A is r x n, the update BA is m x n."""

    m: int
    n: int
    r: int

    def __post_init__(self) -> None:
        if self.m < 1 or self.n < 1:
            raise ShapeError(f"dimensions must be >= 1, got m={self.m}, n={self.n}")
        if self.r < 1:
            raise ShapeError(f"rank must be >= 1, got r={self.r}")
        if self.r > min(self.m, self.n):
            raise ShapeError(f"rank r={self.r} exceeds min(m, n)={min(self.m, self.n)}")

    @property
    def h(self) -> int | None:
        """Hidden dimension when the layer is square (m == n), else None."""
        return self.m if self.m == self.n else None


@dataclass(frozen=True)
class RawAdapter:
    """A low-rank pair (B: m x r, A: r x n) attached to a named layer."""

    id: str
    layer: str
    library_tag: str
    A: np.ndarray
    B: np.ndarray
    dims: Dims = field(init=False)

    def __post_init__(self) -> None:
        if self.library_tag not in LIBRARY_TAGS:
            raise LibraryError(f"unknown library tag {self.library_tag!r}, expected one of {LIBRARY_TAGS}")
        A = frozen_f32(self.A)
        B = frozen_f32(self.B)
        if A.ndim != 2 or B.ndim != 2:
            raise ShapeError(f"adapter {self.id!r}: A and B must be 2-D, got {A.shape} and {B.shape}")
        if B.shape[1] != A.shape[0]:
            raise ShapeError(
                f"adapter {self.id!r}: B has {B.shape[1]} columns but A has {A.shape[0]} rows"
            )
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise NumericError(f"adapter {self.id!r} contains non-finite entries")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "dims", Dims(m=B.shape[0], n=A.shape[1], r=A.shape[0]))


@dataclass(frozen=True)
class AlignedAdapter:
    """The SVD-aligned form of an adapter.

    A_star (r_eff x n) has orthonormal rows (V^T of the product BA), B_star
    (m x r_eff) is U * diag(S), and the first A_star row is the arrow vector:
    the unit input direction producing the largest adapter activation.
    """

    id: str
    layer: str
    library_tag: str
    A_star: np.ndarray
    B_star: np.ndarray
    singular_values: np.ndarray

    def __post_init__(self) -> None:
        A_star = frozen_f32(self.A_star)
        B_star = frozen_f32(self.B_star)
        sv = frozen_f32(self.singular_values)
        if A_star.ndim != 2 or B_star.ndim != 2 or sv.ndim != 1:
            raise ShapeError(f"adapter {self.id!r}: bad aligned shapes {A_star.shape}, {B_star.shape}, {sv.shape}")
        r_eff = sv.shape[0]
        if A_star.shape[0] != r_eff or B_star.shape[1] != r_eff:
            raise ShapeError(
                f"adapter {self.id!r}: {r_eff} singular values but A_star is {A_star.shape} "
                f"and B_star is {B_star.shape}"
            )
        if r_eff > 1 and np.any(np.diff(sv) > 0):
            raise ShapeError(f"adapter {self.id!r}: singular values must be sorted descending")
        object.__setattr__(self, "A_star", A_star)
        object.__setattr__(self, "B_star", B_star)
        object.__setattr__(self, "singular_values", sv)

    @property
    def r_eff(self) -> int:
        """Effective rank after tolerance truncation."""
        return self.singular_values.shape[0]

    @property
    def degenerate(self) -> bool:
        """True when the adapter product was numerically zero (r_eff == 0)."""
        return self.r_eff == 0

    @property
    def n(self) -> int:
        return self.A_star.shape[1]

    @property
    def m(self) -> int:
        return self.B_star.shape[0]

    @property
    def arrow(self) -> np.ndarray:
        """Row 0 of A_star; not stored separately."""
        if self.degenerate:
            raise RoutingError(f"degenerate adapter {self.id!r} has no arrow vector")
        return self.A_star[0]


class AdapterLibrary:
    """Per-layer collection of aligned adapters plus packed arrow matrices.

    Row i of a layer's arrow matrix is bit-identical to adapter i's first
    A_star row. Immutable after construction. Degenerate adapters are never
    admitted; they are reported by the alignment step instead.
    """

    def __init__(self, tag: str, layers: Mapping[str, Sequence[AlignedAdapter]]):
        if tag not in LIBRARY_TAGS:
            raise LibraryError(f"unknown library tag {tag!r}, expected one of {LIBRARY_TAGS}")
        self.tag = tag
        self._layers: dict[str, tuple[AlignedAdapter, ...]] = {}
        self._arrow_matrices: dict[str, np.ndarray] = {}
        seen_ids: set[str] = set()
        for layer, adapters in layers.items():
            adapters = tuple(adapters)
            if not adapters:
                continue
            n = adapters[0].n
            for a in adapters:
                if a.library_tag != tag:
                    raise LibraryError(f"adapter {a.id!r} is tagged {a.library_tag!r}, library is {tag!r}")
                if a.layer != layer:
                    raise LibraryError(f"adapter {a.id!r} is for layer {a.layer!r}, filed under {layer!r}")
                if a.degenerate:
                    raise LibraryError(f"degenerate adapter {a.id!r} cannot join a library")
                if a.n != n:
                    raise ShapeError(f"layer {layer!r}: adapter {a.id!r} has n={a.n}, expected {n}")
                if a.id in seen_ids:
                    raise LibraryError(f"duplicate adapter id {a.id!r}")
                seen_ids.add(a.id)
            self._layers[layer] = adapters
            packed = np.stack([a.A_star[0] for a in adapters])
            packed.setflags(write=False)
            self._arrow_matrices[layer] = packed

    @property
    def layers(self) -> tuple[str, ...]:
        return tuple(self._layers)

    def has_layer(self, layer: str) -> bool:
        return layer in self._layers

    def adapters(self, layer: str) -> tuple[AlignedAdapter, ...]:
        return self._layers[layer]

    def arrow_matrix(self, layer: str) -> np.ndarray:
        return self._arrow_matrices[layer]

    def n_adapters(self, layer: str | None = None) -> int:
        if layer is not None:
            return len(self._layers.get(layer, ()))
        return sum(len(v) for v in self._layers.values())

    def __len__(self) -> int:
        return self.n_adapters()

    def __repr__(self) -> str:
        return f"AdapterLibrary(tag={self.tag!r}, layers={len(self._layers)}, adapters={len(self)})"


@dataclass(frozen=True)
class RoutingConfig:
    """Two-stage routing parameters.

    k is the arrow filter width; svd_tolerance truncates singular values
    below tol * sigma_1 during alignment. Ties are always broken toward the
    lowest library index so batched and looped paths agree exactly.
    """

    k: int = DEFAULT_TOP_K
    svd_tolerance: float = DEFAULT_SVD_TOLERANCE
    tie_break: str = TIE_LOWEST_INDEX

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.svd_tolerance < 0:
            raise ValueError(f"svd_tolerance must be >= 0, got {self.svd_tolerance}")
        if self.tie_break != TIE_LOWEST_INDEX:
            raise ValueError(f"unsupported tie-break rule {self.tie_break!r}")

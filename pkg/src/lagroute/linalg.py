"""Rank-r SVD of adapter products and offline spectral alignment.

The SVD of BA is computed without materializing the m x n product: QR-factor
B and A^T, then take the dense SVD of the r x r core R_B R_A^T. Cost is
O((m + n) r^2 + r^3), which keeps alignment cheap even for libraries of
thousands of adapters. Computation runs in float64; aligned factors are
stored in float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lagroute.core import (
    AdapterLibrary,
    AlignedAdapter,
    LibraryError,
    NumericError,
    RawAdapter,
    RoutingConfig,
    ShapeError,
)


@dataclass(frozen=True)
class SvdResult:
    """Truncated SVD U diag(S) V^T of an adapter product, in float64.

    U (m x r_eff) and V (n x r_eff) have orthonormal columns; S holds the
    r_eff singular values above tolerance, sorted descending.
    """

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    @property
    def r_eff(self) -> int:
        return self.S.shape[0]


def svd_rank_r(B: np.ndarray, A: np.ndarray, tol: float = 0.0) -> SvdResult:
    """Top-r SVD of the product BA given its low-rank factors.

    Singular values below tol * sigma_1 are truncated. Each right-singular
    vector's sign is fixed so its largest-magnitude entry is positive, making
    serialized alignments reproducible (routing itself is sign-invariant).
    """
    B = np.asarray(B, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if B.ndim != 2 or A.ndim != 2:
        raise ShapeError(f"B and A must be 2-D, got {B.shape} and {A.shape}")
    if B.shape[1] != A.shape[0]:
        raise ShapeError(f"B has {B.shape[1]} columns but A has {A.shape[0]} rows")
    if not (np.all(np.isfinite(B)) and np.all(np.isfinite(A))):
        raise NumericError("non-finite entries in adapter factors")
    if tol < 0:
        raise ShapeError(f"tolerance must be >= 0, got {tol}")

    q_b, r_b = np.linalg.qr(B)
    q_a, r_a = np.linalg.qr(A.T)
    core_u, s, core_vt = np.linalg.svd(r_b @ r_a.T)

    if s.size == 0 or s[0] <= 0.0:
        r_eff = 0
    else:
        r_eff = int(np.count_nonzero(s > tol * s[0]))
    u = q_b @ core_u[:, :r_eff]
    v = q_a @ core_vt[:r_eff].T
    s = s[:r_eff]

    # Sign convention: largest-magnitude entry of each V column positive.
    for j in range(r_eff):
        lead = v[np.argmax(np.abs(v[:, j])), j]
        if lead < 0:
            v[:, j] = -v[:, j]
            u[:, j] = -u[:, j]
    return SvdResult(U=u, S=s, V=v)


def align(adapter: RawAdapter, cfg: RoutingConfig | None = None) -> AlignedAdapter:
    """Rewrite (B, A) as (B_star, A_star) = (U diag(S), V^T), preserving BA.

    A zero product yields a degenerate result (r_eff == 0) rather than an
    error; callers exclude such adapters from routing.
    """
    cfg = cfg or RoutingConfig()
    res = svd_rank_r(adapter.B, adapter.A, tol=cfg.svd_tolerance)
    return AlignedAdapter(
        id=adapter.id,
        layer=adapter.layer,
        library_tag=adapter.library_tag,
        A_star=res.V.T,
        B_star=res.U * res.S,
        singular_values=res.S,
    )


@dataclass(frozen=True)
class SkippedAdapter:
    """One adapter excluded during library alignment, with the reason."""

    id: str
    layer: str
    reason: str


def align_library(
    adapters: list[RawAdapter] | tuple[RawAdapter, ...],
    cfg: RoutingConfig | None = None,
    *,
    tag: str | None = None,
) -> tuple[AdapterLibrary, list[SkippedAdapter]]:
    """Align every adapter and pack per-layer arrow matrices.

    All adapters must share one library tag (pass `tag` explicitly for an
    empty input). Degenerate adapters are left out of the library and listed
    in the returned skip report. Input order defines the canonical per-layer
    index used for tie-breaking.
    """
    cfg = cfg or RoutingConfig()
    tags = {a.library_tag for a in adapters}
    if len(tags) > 1:
        raise LibraryError(f"adapters mix library tags {sorted(tags)}")
    if tags:
        found = tags.pop()
        if tag is not None and tag != found:
            raise LibraryError(f"adapters are tagged {found!r} but tag={tag!r} was requested")
        tag = found
    elif tag is None:
        raise LibraryError("empty adapter list: pass tag= to build an empty library")

    widths: dict[str, int] = {}
    for a in adapters:
        n = widths.setdefault(a.layer, a.dims.n)
        if a.dims.n != n:
            raise ShapeError(f"layer {a.layer!r}: adapter {a.id!r} has n={a.dims.n}, expected {n}")

    layers: dict[str, list[AlignedAdapter]] = {}
    skipped: list[SkippedAdapter] = []
    for a in adapters:
        aligned = align(a, cfg)
        if aligned.degenerate:
            skipped.append(SkippedAdapter(id=a.id, layer=a.layer, reason="degenerate: zero product BA"))
            continue
        layers.setdefault(a.layer, []).append(aligned)
    return AdapterLibrary(tag, layers), skipped

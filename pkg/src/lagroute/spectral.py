"""Second-stage reranking: spectral scores over the candidate set.

The spectral score of an adapter is ||A_star x||_2, the length of the token
representation in the adapter's row basis. The winning projection A_star x
is cached on the Selection so applying the adapter later costs only the
B_star product.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from lagroute.core import (
    AlignedAdapter,
    LagError,
    RoutingError,
    ShapeError,
    TIE_LOWEST_INDEX,
)


@dataclass(frozen=True)
class Selection:
    """Rerank winner for one (token, layer, library) decision."""

    adapter_index: int
    adapter_id: str
    spectr_score: float
    projected: np.ndarray

    def __post_init__(self) -> None:
        projected = np.ascontiguousarray(self.projected, dtype=np.float32)
        projected.setflags(write=False)
        object.__setattr__(self, "projected", projected)


def spectr_score(adapter: AlignedAdapter, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Return (||A_star x||_2, A_star x).

    The projection is computed in float32; the norm accumulates in float64 so
    tie decisions are stable across batch layouts.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 1 or x.shape[0] != adapter.n:
        raise ShapeError(
            f"adapter {adapter.id!r} expects a token of length {adapter.n}, got shape {x.shape}"
        )
    projected = adapter.A_star @ x
    score = float(np.sqrt(np.sum(projected.astype(np.float64) ** 2)))
    return score, projected


def rerank(
    candidates,
    layer_adapters: Sequence[AlignedAdapter],
    x: np.ndarray,
    tie_break: str = TIE_LOWEST_INDEX,
) -> Selection:
    """Pick the candidate with the largest spectral score.

    `candidates` is a CandidateSet or any iterable of library indices into
    `layer_adapters`. Ties go to the lowest library index.
    """
    if tie_break != TIE_LOWEST_INDEX:
        raise LagError(f"unsupported tie-break rule {tie_break!r}")
    indices = getattr(candidates, "indices", candidates)
    best: Selection | None = None
    for idx in indices:
        idx = int(idx)
        if not 0 <= idx < len(layer_adapters):
            raise RoutingError(f"candidate index {idx} outside library of {len(layer_adapters)}")
        adapter = layer_adapters[idx]
        score, projected = spectr_score(adapter, x)
        if best is None or score > best.spectr_score or (
            score == best.spectr_score and idx < best.adapter_index
        ):
            best = Selection(
                adapter_index=idx, adapter_id=adapter.id, spectr_score=score, projected=projected
            )
    if best is None:
        raise RoutingError("empty candidate set: no adapters available to rerank")
    return best

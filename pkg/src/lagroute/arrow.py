"""First-stage retrieval: arrow scores and deterministic top-k selection.

Scoring one layer is a single matrix-vector product over the packed arrow
matrix (2 * n_adapters * n FLOPs). Selection is a partial select when the
library is much larger than k, with exact ties always broken toward the
lowest library index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lagroute.core import LagError, ShapeError, TIE_LOWEST_INDEX

# Below this ratio a full sort is as fast as a partial select.
_PARTIAL_SELECT_FACTOR = 4


@dataclass(frozen=True)
class CandidateSet:
    """Top-k retrieval result: library indices in descending arrow score."""

    indices: np.ndarray
    scores: np.ndarray

    def __post_init__(self) -> None:
        indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        scores = np.ascontiguousarray(self.scores, dtype=np.float32)
        if indices.shape != scores.shape or indices.ndim != 1:
            raise ShapeError(f"mismatched candidate shapes {indices.shape} vs {scores.shape}")
        indices.setflags(write=False)
        scores.setflags(write=False)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return self.indices.shape[0]


def arrow_scores(x: np.ndarray, arrow_matrix: np.ndarray) -> np.ndarray:
    """Score every adapter in a layer by |arrow_i . x|."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 1:
        raise ShapeError(f"token vector must be 1-D, got shape {x.shape}")
    if arrow_matrix.ndim != 2 or arrow_matrix.shape[1] != x.shape[0]:
        raise ShapeError(
            f"arrow matrix {arrow_matrix.shape} incompatible with token of length {x.shape[0]}"
        )
    return np.abs(arrow_matrix @ x)


def topk(scores: np.ndarray, k: int, tie_break: str = TIE_LOWEST_INDEX) -> CandidateSet:
    """Select the min(k, len) largest scores, deterministically.

    Exact ties are resolved toward the lower index, including ties that
    straddle the k-th position.
    """
    if k < 1:
        raise LagError(f"k must be >= 1, got {k}")
    if tie_break != TIE_LOWEST_INDEX:
        raise LagError(f"unsupported tie-break rule {tie_break!r}")
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise ShapeError(f"scores must be 1-D, got shape {scores.shape}")
    n = scores.shape[0]
    k_eff = min(k, n)

    if k_eff == n or n <= _PARTIAL_SELECT_FACTOR * k_eff:
        pool = np.arange(n)
    else:
        # Partial select, then repair boundary ties: take everything strictly
        # above the k-th value and fill the remainder with the lowest-index
        # entries equal to it.
        kth = np.partition(scores, n - k_eff)[n - k_eff]
        above = np.flatnonzero(scores > kth)
        fill = k_eff - above.shape[0]
        pool = np.concatenate([above, np.flatnonzero(scores == kth)[:fill]])

    order = np.argsort(-scores[pool], kind="stable")[:k_eff]
    chosen = pool[order]
    return CandidateSet(indices=chosen, scores=scores[chosen].astype(np.float32))

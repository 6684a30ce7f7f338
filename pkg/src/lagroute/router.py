"""Per-token, per-layer routing across task and knowledge libraries.

Each library covering a layer is routed independently (arrow top-k filter,
then spectral rerank) and contributes exactly one adapter; the winners'
deltas add onto the base layer output. When the filter width k reaches the
library size the arrow stage is skipped entirely, so routing degenerates to
an exhaustive spectral pass; at k == 1 it degenerates to pure arrow routing.

A RouteTrace records every decision plus an instrumented FLOP tally
(multiply-add counted as 2) for comparison against the closed-form cost
model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from lagroute.arrow import arrow_scores, topk
from lagroute.core import (
    AdapterLibrary,
    AlignedAdapter,
    LibraryError,
    NumericError,
    RoutingConfig,
    RoutingError,
    ShapeError,
    as_token_vector,
)
from lagroute.spectral import Selection, spectr_score


@dataclass
class FlopTally:
    """Adapter-routing FLOPs by stage; base-layer W products are not counted."""

    arrow: int = 0
    project: int = 0
    norm: int = 0
    apply: int = 0

    @property
    def total(self) -> int:
        return self.arrow + self.project + self.norm + self.apply


@dataclass(frozen=True)
class TraceEntry:
    """One routing decision: (token, layer, library) -> selected adapter."""

    token: int
    layer: str
    library: str
    candidate_indices: tuple[int, ...]
    arrow_scores: tuple[float, ...] | None
    spectral_scores: tuple[float, ...]
    selected_index: int
    selected_id: str


class RouteTrace:
    """Ordered record of routing decisions with a cumulative FLOP tally."""

    def __init__(self) -> None:
        self.entries: list[TraceEntry] = []
        self.flops = FlopTally()

    def record(self, entry: TraceEntry) -> None:
        self.entries.append(entry)

    def merge(self, other: "RouteTrace") -> None:
        """Fold another trace's decisions and FLOPs into this one."""
        self.entries.extend(other.entries)
        self.flops.arrow += other.flops.arrow
        self.flops.project += other.flops.project
        self.flops.norm += other.flops.norm
        self.flops.apply += other.flops.apply

    def __len__(self) -> int:
        return len(self.entries)

    def _filtered(self, layer: str | None, library: str | None) -> list[TraceEntry]:
        return [
            e
            for e in self.entries
            if (layer is None or e.layer == layer) and (library is None or e.library == library)
        ]

    def selected_working_set(self, layer: str | None = None, library: str | None = None) -> set[str]:
        """Distinct adapter ids actually applied for the filtered decisions."""
        return {e.selected_id for e in self._filtered(layer, library)}

    def candidate_working_set(self, layer: str | None = None, library: str | None = None) -> set[int]:
        """Distinct library indices that had to be resident for reranking."""
        out: set[int] = set()
        for e in self._filtered(layer, library):
            out.update(e.candidate_indices)
        return out

    def flops_per_decision(self) -> float:
        """Mean adapter-routing FLOPs per (token, layer, library) decision."""
        if not self.entries:
            raise RoutingError("empty trace: no routing decisions recorded")
        return self.flops.total / len(self.entries)


def _as_libraries(libs) -> tuple[AdapterLibrary, ...]:
    if isinstance(libs, AdapterLibrary):
        libs = (libs,)
    libs = tuple(libs)
    tags = [lib.tag for lib in libs]
    if len(set(tags)) != len(tags):
        raise LibraryError(f"duplicate library tags {tags}")
    return libs


def _rerank_scored(
    indices: Sequence[int], adapters: Sequence[AlignedAdapter], x: np.ndarray
) -> tuple[Selection, list[float]]:
    """Exhaustive rerank over `indices`, returning all candidate scores."""
    best: Selection | None = None
    scores: list[float] = []
    for idx in indices:
        idx = int(idx)
        adapter = adapters[idx]
        score, projected = spectr_score(adapter, x)
        scores.append(score)
        if best is None or score > best.spectr_score or (
            score == best.spectr_score and idx < best.adapter_index
        ):
            best = Selection(
                adapter_index=idx, adapter_id=adapter.id, spectr_score=score, projected=projected
            )
    if best is None:
        raise RoutingError("empty candidate set: no adapters available to rerank")
    return best, scores


def _select_for_library(
    x: np.ndarray,
    lib: AdapterLibrary,
    layer: str,
    cfg: RoutingConfig,
    trace: RouteTrace | None,
    token: int,
    precomputed_scores: np.ndarray | None = None,
) -> Selection:
    """Two-stage decision for one library at one layer.

    `precomputed_scores` carries batched arrow scores; its FLOPs are counted
    at the batch site. When cfg.k covers the whole layer the filter is
    skipped and no arrow FLOPs accrue.
    """
    adapters = lib.adapters(layer)
    n_adapters = len(adapters)
    width = lib.arrow_matrix(layer).shape[1]

    if cfg.k >= n_adapters:
        cand_indices: tuple[int, ...] = tuple(range(n_adapters))
        cand_arrow: tuple[float, ...] | None = None
    else:
        if precomputed_scores is None:
            scores = arrow_scores(x, lib.arrow_matrix(layer))
            if trace is not None:
                trace.flops.arrow += 2 * n_adapters * width
        else:
            scores = precomputed_scores
        cand = topk(scores, cfg.k, cfg.tie_break)
        cand_indices = tuple(int(i) for i in cand.indices)
        cand_arrow = tuple(float(s) for s in cand.scores)

    selection, spectral = _rerank_scored(cand_indices, adapters, x)
    if trace is not None:
        sum_rank = sum(adapters[i].r_eff for i in cand_indices)
        trace.flops.project += 2 * width * sum_rank
        trace.flops.norm += 2 * sum_rank
        trace.record(
            TraceEntry(
                token=token,
                layer=layer,
                library=lib.tag,
                candidate_indices=cand_indices,
                arrow_scores=cand_arrow,
                spectral_scores=tuple(spectral),
                selected_index=selection.adapter_index,
                selected_id=selection.adapter_id,
            )
        )
    return selection


def route_token(
    x: np.ndarray,
    layer: str,
    libs,
    cfg: RoutingConfig | None = None,
    trace: RouteTrace | None = None,
    token: int = 0,
) -> dict[str, Selection]:
    """Route one token at one layer, independently per applicable library.

    Returns {library_tag: Selection}; an empty dict means no library covers
    this layer and the base layer output passes through unmodified.
    """
    cfg = cfg or RoutingConfig()
    libs = _as_libraries(libs)
    selections: dict[str, Selection] = {}
    for lib in libs:
        if not lib.has_layer(layer):
            continue
        x_checked = as_token_vector(x, lib.arrow_matrix(layer).shape[1])
        selections[lib.tag] = _select_for_library(x_checked, lib, layer, cfg, trace, token)
    return selections


def apply(
    x: np.ndarray,
    W: np.ndarray,
    selections: Mapping[str, Selection],
    libs,
    layer: str,
    trace: RouteTrace | None = None,
) -> np.ndarray:
    """Layer output: W x plus each selected adapter's B_star (A_star x).

    Reuses the projection cached on each Selection; the selections must have
    been produced from this same x and layer.
    """
    libs = {lib.tag: lib for lib in _as_libraries(libs)}
    W = np.asarray(W, dtype=np.float32)
    if W.ndim != 2:
        raise ShapeError(f"layer matrix must be 2-D, got shape {W.shape}")
    x = as_token_vector(x, W.shape[1])
    h = W @ x
    for tag, sel in selections.items():
        if tag not in libs:
            raise RoutingError(f"selection references library {tag!r} which was not provided")
        adapter = _winner(libs[tag], layer, sel)
        if adapter.m != W.shape[0]:
            raise ShapeError(f"adapter {adapter.id!r} outputs {adapter.m} dims, layer outputs {W.shape[0]}")
        h = h + adapter.B_star @ sel.projected
        if trace is not None:
            trace.flops.apply += 2 * adapter.m * adapter.r_eff
    return h


def _winner(lib: AdapterLibrary, layer: str, sel: Selection) -> AlignedAdapter:
    adapters = lib.adapters(layer)
    if not 0 <= sel.adapter_index < len(adapters):
        raise RoutingError(f"selection index {sel.adapter_index} outside layer {layer!r}")
    adapter = adapters[sel.adapter_index]
    if adapter.id != sel.adapter_id or sel.projected.shape[0] != adapter.r_eff:
        raise RoutingError(
            f"stale selection for layer {layer!r}: cached projection does not match adapter "
            f"{adapter.id!r} (r_eff={adapter.r_eff})"
        )
    return adapter


def route_sequence(
    X,
    layers: Sequence[tuple[str, np.ndarray]],
    libs,
    cfg: RoutingConfig | None = None,
    trace: RouteTrace | None = None,
) -> tuple[dict[str, np.ndarray], RouteTrace]:
    """Route and apply a whole token sequence through a stack of linear layers.

    X is an (s, n) array shared by every layer, or a mapping layer id ->
    (s, n) array. Every token at every layer is routed independently; arrow
    scoring is batched into one matrix product per (layer, library), which
    must not (and, tested, does not) change any decision relative to the
    per-token loop. Returns ({layer id: (s, m) outputs}, trace).
    """
    cfg = cfg or RoutingConfig()
    libs = _as_libraries(libs)
    if trace is None:
        trace = RouteTrace()

    seq_len: int | None = None
    outputs: dict[str, np.ndarray] = {}
    for layer_id, W in layers:
        if isinstance(X, Mapping):
            if layer_id not in X:
                raise ShapeError(f"no token input provided for layer {layer_id!r}")
            X_l = X[layer_id]
        else:
            X_l = X
        X_l = np.ascontiguousarray(X_l, dtype=np.float32)
        if X_l.ndim != 2:
            raise ShapeError(f"layer {layer_id!r}: expected (tokens, n) input, got shape {X_l.shape}")
        if not np.all(np.isfinite(X_l)):
            raise NumericError(f"layer {layer_id!r}: token inputs contain non-finite entries")
        if seq_len is None:
            seq_len = X_l.shape[0]
        elif X_l.shape[0] != seq_len:
            raise ShapeError(f"layer {layer_id!r}: sequence length {X_l.shape[0]} != {seq_len}")

        W = np.asarray(W, dtype=np.float32)
        if W.ndim != 2 or W.shape[1] != X_l.shape[1]:
            raise ShapeError(f"layer {layer_id!r}: W shape {W.shape} incompatible with n={X_l.shape[1]}")
        out = np.ascontiguousarray((W @ X_l.T).T)

        covering = [lib for lib in libs if lib.has_layer(layer_id)]
        batched: dict[str, np.ndarray] = {}
        for lib in covering:
            M = lib.arrow_matrix(layer_id)
            if M.shape[1] != X_l.shape[1]:
                raise ShapeError(
                    f"layer {layer_id!r}: library {lib.tag!r} width {M.shape[1]} != input {X_l.shape[1]}"
                )
            if cfg.k < len(lib.adapters(layer_id)):
                batched[lib.tag] = np.abs(M @ X_l.T)
                trace.flops.arrow += 2 * M.shape[0] * M.shape[1] * X_l.shape[0]

        for t in range(X_l.shape[0]):
            x_t = X_l[t]
            for lib in covering:
                scores_t = batched[lib.tag][:, t] if lib.tag in batched else None
                sel = _select_for_library(x_t, lib, layer_id, cfg, trace, t, scores_t)
                adapter = lib.adapters(layer_id)[sel.adapter_index]
                if adapter.m != out.shape[1]:
                    raise ShapeError(
                        f"adapter {adapter.id!r} outputs {adapter.m} dims, layer outputs {out.shape[1]}"
                    )
                out[t] += adapter.B_star @ sel.projected
                trace.flops.apply += 2 * adapter.m * adapter.r_eff
        out.setflags(write=False)
        outputs[layer_id] = out
    return outputs, trace

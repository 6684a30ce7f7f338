"""Planted-subspace benchmark with known ground-truth routing targets.

Adapters are constructed so their spectral structure is exact by design:
B gets orthonormal columns P, A = diag(s) @ basis with orthonormal basis
rows, so P diag(s) basis already is a singular value decomposition of BA
and alignment recovers the planted basis (up to sign) and the planted
spectrum s. Tokens are drawn inside a chosen adapter's planted row-space
and mixed with a unit noise vector orthogonal to that space, so the noise
level epsilon is exactly the fraction of token energy outside the space.

Two planting modes: "orthogonal" makes all adapters' row-spaces mutually
orthogonal (provable ground truth, needs n_adapters * r <= hidden) and
"gaussian" draws independent random subspaces (scales to thousands of
adapters). "auto" picks orthogonal when it fits.

Token coefficients are tilted toward the top of each adapter's spectrum
(weight decay^j on direction j) so the first right-singular vector carries
most in-space energy, which is what makes single-row screening informative.
"""

from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from lagroute.core import (
    KNOWLEDGE,
    LIBRARY_TAGS,
    TASK,
    AdapterLibrary,
    CapacityError,
    LibraryError,
    RawAdapter,
    RoutingConfig,
    RoutingError,
    ShapeError,
    frozen_f32,
)
from lagroute.linalg import align_library
from lagroute.metrics import cost_model
from lagroute.router import RouteTrace, route_sequence

DEFAULT_HIDDEN = 64
DEFAULT_TASK_RANK = 8
DEFAULT_KNOWLEDGE_RANK = 6
DEFAULT_TOKENS = 64
DEFAULT_DECAY = 0.6
DEFAULT_SPECTR_BUDGET = 512

METHODS = ("arrow", "spectr", "lag")
MODES = ("orthogonal", "gaussian", "auto")

CSV_COLUMNS = (
    "method",
    "k",
    "epsilon",
    "n_adapters",
    "seed",
    "layer",
    "library",
    "accuracy",
    "containment",
    "flops_per_token",
)


@dataclass(frozen=True)
class LayerSpec:
    """One linear layer: id, frozen weight matrix, and the libraries routing it."""

    layer_id: str
    W: np.ndarray
    libraries: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "W", frozen_f32(np.asarray(self.W)))
        if self.W.ndim != 2:
            raise ShapeError(f"layer {self.layer_id!r}: W must be 2-D, got shape {self.W.shape}")
        if not np.all(np.isfinite(self.W)):
            raise ValueError(f"layer {self.layer_id!r}: W contains non-finite entries")
        bad = set(self.libraries) - set(LIBRARY_TAGS)
        if bad:
            raise LibraryError(f"layer {self.layer_id!r}: unknown library tags {sorted(bad)}")


@dataclass(frozen=True)
class TokenBatch:
    """Tokens for one (layer, library) stream with per-token ground truth."""

    layer: str
    library: str
    X: np.ndarray
    truth_indices: np.ndarray
    truth_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "X", frozen_f32(np.asarray(self.X)))
        truth = np.ascontiguousarray(self.truth_indices, dtype=np.int64)
        truth.setflags(write=False)
        object.__setattr__(self, "truth_indices", truth)
        if self.X.ndim != 2 or self.X.shape[0] != truth.shape[0] or len(self.truth_ids) != truth.shape[0]:
            raise ShapeError(
                f"batch {self.layer}/{self.library}: inconsistent token count "
                f"(X {self.X.shape}, truth {truth.shape}, ids {len(self.truth_ids)})"
            )

    def __len__(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class PlantedBenchmark:
    """Aligned libraries, layer stack, token streams, and the planting used."""

    seed: int
    epsilon: float
    mode: str
    hidden: int
    n_adapters: int
    decay: float
    ranks: Mapping[str, int]
    layer_specs: tuple[LayerSpec, ...]
    libraries: tuple[AdapterLibrary, ...]
    batches: tuple[TokenBatch, ...]
    planted_bases: Mapping[tuple[str, str], np.ndarray]

    def library(self, tag: str) -> AdapterLibrary:
        for lib in self.libraries:
            if lib.tag == tag:
                return lib
        raise LibraryError(f"benchmark has no {tag!r} library")

    def layer_spec(self, layer_id: str) -> LayerSpec:
        for spec in self.layer_specs:
            if spec.layer_id == layer_id:
                return spec
        raise LibraryError(f"benchmark has no layer {layer_id!r}")

    def batch(self, layer: str, tag: str) -> TokenBatch:
        for b in self.batches:
            if b.layer == layer and b.library == tag:
                return b
        raise LibraryError(f"benchmark has no token batch for {layer!r}/{tag!r}")

    def singular_profile(self, tag: str) -> np.ndarray:
        return self.decay ** np.arange(self.ranks[tag], dtype=np.float64)


def _orthonormal_columns(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Random (rows, cols) matrix with orthonormal columns, sign-normalized."""
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def _unit_complement(z: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Unit vector orthogonal to the rows of basis, preferring direction z."""
    residual = z - basis.T @ (basis @ z)
    norm = np.linalg.norm(residual)
    if norm > 1e-9:
        return residual / norm
    # z happened to lie in the planted space; fall back to coordinate axes.
    for i in range(basis.shape[1]):
        e = np.zeros(basis.shape[1])
        e[i] = 1.0
        residual = e - basis.T @ (basis @ e)
        norm = np.linalg.norm(residual)
        if norm > 1e-6:
            return residual / norm
    raise CapacityError("planted space fills the whole token space; no room for noise")


def generate_benchmark(
    n_adapters: int,
    hidden: int = DEFAULT_HIDDEN,
    task_rank: int = DEFAULT_TASK_RANK,
    knowledge_rank: int = DEFAULT_KNOWLEDGE_RANK,
    layers: int = 2,
    n_tokens: int = DEFAULT_TOKENS,
    epsilon: float = 0.0,
    seed: int = 0,
    mode: str = "auto",
    decay: float = DEFAULT_DECAY,
    libraries: Sequence[str] = (TASK, KNOWLEDGE),
) -> PlantedBenchmark:
    """Build a seeded benchmark with one library stream per layer.

    Layers alternate over the included libraries (task layers are named
    attn.*, knowledge layers mlp.*). Each (layer, library) pair gets its own
    planted subspaces and its own n_tokens-token stream. Bit-identical under
    a fixed seed; epsilon only changes how the already-drawn in-space and
    noise vectors are mixed, never which vectors are drawn.
    """
    if n_adapters < 1 or layers < 1 or n_tokens < 1 or hidden < 1:
        raise ValueError("n_adapters, layers, n_tokens, and hidden must all be >= 1")
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    if not 0.0 < decay <= 1.0:
        raise ValueError(f"decay must lie in (0, 1], got {decay}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    included = tuple(dict.fromkeys(libraries))
    if not included or set(included) - set(LIBRARY_TAGS):
        raise LibraryError(f"libraries must be a nonempty subset of {LIBRARY_TAGS}, got {libraries!r}")
    ranks = {TASK: int(task_rank), KNOWLEDGE: int(knowledge_rank)}
    ranks = {tag: ranks[tag] for tag in included}
    for tag, r in ranks.items():
        if not 1 <= r <= hidden:
            raise ValueError(f"{tag} rank must lie in [1, hidden], got {r}")

    if mode == "auto":
        fits = all(n_adapters * r <= hidden for r in ranks.values())
        mode = "orthogonal" if fits else "gaussian"
    if mode == "orthogonal":
        for tag, r in ranks.items():
            if n_adapters * r > hidden:
                raise CapacityError(
                    f"orthogonal planting needs n_adapters*r <= hidden; "
                    f"{tag} rank {r} at hidden {hidden} allows at most {hidden // r} adapters"
                )

    rng = np.random.default_rng(seed)
    specs: list[LayerSpec] = []
    counters = {tag: 0 for tag in included}
    for i in range(layers):
        tag = included[i % len(included)]
        prefix = "attn" if tag == TASK else "mlp"
        layer_id = f"{prefix}.{counters[tag]}"
        counters[tag] += 1
        W = rng.standard_normal((hidden, hidden)) / math.sqrt(hidden)
        specs.append(LayerSpec(layer_id=layer_id, W=W, libraries=(tag,)))

    raw_by_tag: dict[str, list[RawAdapter]] = {tag: [] for tag in included}
    planted: dict[tuple[str, str], np.ndarray] = {}
    batches: list[TokenBatch] = []
    for spec in specs:
        tag = spec.libraries[0]
        r = ranks[tag]
        s = decay ** np.arange(r, dtype=np.float64)

        if mode == "orthogonal":
            row_block = _orthonormal_columns(rng, hidden, n_adapters * r)
            col_block = _orthonormal_columns(rng, hidden, n_adapters * r)
            bases = [row_block[:, j * r : (j + 1) * r].T for j in range(n_adapters)]
            outs = [col_block[:, j * r : (j + 1) * r] for j in range(n_adapters)]
        else:
            bases, outs = [], []
            for _ in range(n_adapters):
                bases.append(_orthonormal_columns(rng, hidden, r).T)
                outs.append(_orthonormal_columns(rng, hidden, r))

        ids = []
        for j in range(n_adapters):
            adapter_id = f"{tag}-{j:04d}@{spec.layer_id}"
            ids.append(adapter_id)
            raw_by_tag[tag].append(
                RawAdapter(
                    id=adapter_id,
                    layer=spec.layer_id,
                    library_tag=tag,
                    A=(s[:, None] * bases[j]).astype(np.float32),
                    B=outs[j].astype(np.float32),
                )
            )
        stacked = np.ascontiguousarray(np.stack(bases))
        stacked.setflags(write=False)
        planted[(spec.layer_id, tag)] = stacked

        truth = rng.integers(0, n_adapters, size=n_tokens)
        X = np.empty((n_tokens, hidden), dtype=np.float64)
        for t in range(n_tokens):
            basis = bases[int(truth[t])]
            g = rng.standard_normal(r)
            c = s * g
            norm = np.linalg.norm(c)
            c = c / norm if norm > 1e-12 else s / np.linalg.norm(s)
            x_in = basis.T @ c
            z = rng.standard_normal(hidden)
            x_out = _unit_complement(z, basis)
            X[t] = math.sqrt(1.0 - epsilon) * x_in + math.sqrt(epsilon) * x_out
        batches.append(
            TokenBatch(
                layer=spec.layer_id,
                library=tag,
                X=X.astype(np.float32),
                truth_indices=truth.astype(np.int64),
                truth_ids=tuple(ids[int(j)] for j in truth),
            )
        )

    libs = []
    for tag in included:
        lib, skipped = align_library(raw_by_tag[tag], tag=tag)
        if skipped:
            raise LibraryError(f"planted construction produced degenerate adapters: {skipped}")
        libs.append(lib)

    return PlantedBenchmark(
        seed=int(seed),
        epsilon=float(epsilon),
        mode=mode,
        hidden=int(hidden),
        n_adapters=int(n_adapters),
        decay=float(decay),
        ranks=ranks,
        layer_specs=tuple(specs),
        libraries=tuple(libs),
        batches=tuple(batches),
        planted_bases=planted,
    )


@dataclass(frozen=True)
class EvalRow:
    """Accuracy and cost for one (layer, library) stream."""

    layer: str
    library: str
    accuracy: float
    containment: float
    flops_per_token: float
    tokens: int


@dataclass(frozen=True)
class EvalResult:
    """Evaluation of one method on one benchmark."""

    method: str
    k: int
    epsilon: float
    n_adapters: int
    seed: int
    rows: tuple[EvalRow, ...]
    aggregate: EvalRow
    trace: RouteTrace


def evaluate(
    benchmark: PlantedBenchmark,
    method: str,
    cfg: RoutingConfig | None = None,
    *,
    spectr_budget: int = DEFAULT_SPECTR_BUDGET,
    allow_large_spectr: bool = False,
) -> EvalResult:
    """Route every token stream and score decisions against planted truth.

    accuracy is the fraction of decisions selecting the planted adapter;
    containment is the fraction whose candidate set contains it. Methods
    map onto the engine's degeneracies: arrow runs with k = 1, spectr with
    k = n_adapters (filter skipped), lag with cfg.k. Exhaustive spectr is
    refused above spectr_budget adapters unless allow_large_spectr is set.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    base = cfg or RoutingConfig()
    if method == "arrow":
        k = 1
    elif method == "spectr":
        if benchmark.n_adapters > spectr_budget and not allow_large_spectr:
            raise RoutingError(
                f"exhaustive spectral routing over {benchmark.n_adapters} adapters exceeds "
                f"the budget of {spectr_budget}; pass allow_large_spectr=True to force it"
            )
        k = benchmark.n_adapters
    else:
        k = base.k
    run_cfg = RoutingConfig(k=k, svd_tolerance=base.svd_tolerance, tie_break=base.tie_break)

    rows: list[EvalRow] = []
    master = RouteTrace()
    total_correct = total_contained = total_tokens = 0
    for batch in benchmark.batches:
        spec = benchmark.layer_spec(batch.layer)
        lib = benchmark.library(batch.library)
        trace = RouteTrace()
        route_sequence(batch.X, [(batch.layer, spec.W)], lib, run_cfg, trace=trace)
        correct = contained = 0
        for entry in trace.entries:
            truth = int(batch.truth_indices[entry.token])
            correct += int(entry.selected_index == truth)
            contained += int(truth in entry.candidate_indices)
        tokens = len(trace.entries)
        rows.append(
            EvalRow(
                layer=batch.layer,
                library=batch.library,
                accuracy=correct / tokens,
                containment=contained / tokens,
                flops_per_token=trace.flops.total / tokens,
                tokens=tokens,
            )
        )
        total_correct += correct
        total_contained += contained
        total_tokens += tokens
        master.merge(trace)

    aggregate = EvalRow(
        layer="all",
        library="all",
        accuracy=total_correct / total_tokens,
        containment=total_contained / total_tokens,
        flops_per_token=master.flops.total / total_tokens,
        tokens=total_tokens,
    )
    return EvalResult(
        method=method,
        k=k,
        epsilon=benchmark.epsilon,
        n_adapters=benchmark.n_adapters,
        seed=benchmark.seed,
        rows=tuple(rows),
        aggregate=aggregate,
        trace=master,
    )


@dataclass(frozen=True)
class SweepPoint:
    """One k in a sweep: measured accuracy, closed-form per-token FLOPs."""

    k: int
    accuracy: float
    containment: float
    flops_per_token: float
    result: EvalResult


def sweep_k(
    benchmark: PlantedBenchmark, k_values: Sequence[int], cfg: RoutingConfig | None = None
) -> list[SweepPoint]:
    """Evaluate lag routing at each k.

    Accuracy comes from the engine; the FLOPs column uses the closed-form
    per-token figure so sweep plots match the cost model's axes.
    """
    base = cfg or RoutingConfig()
    points = []
    for k in k_values:
        k = int(k)
        if not 1 <= k <= benchmark.n_adapters:
            raise ValueError(f"k values must lie in [1, {benchmark.n_adapters}], got {k}")
        run_cfg = RoutingConfig(k=k, svd_tolerance=base.svd_tolerance, tie_break=base.tie_break)
        result = evaluate(benchmark, "lag", run_cfg)
        flops = weight = 0.0
        for row in result.rows:
            r = benchmark.ranks[row.library]
            closed = cost_model(benchmark.n_adapters, benchmark.hidden, r, k)
            flops += closed.lag.flops_per_token * row.tokens
            weight += row.tokens
        points.append(
            SweepPoint(
                k=k,
                accuracy=result.aggregate.accuracy,
                containment=result.aggregate.containment,
                flops_per_token=flops / weight,
                result=result,
            )
        )
    return points


def _format_value(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def eval_csv_rows(results: Iterable[EvalResult] | EvalResult) -> list[dict[str, str]]:
    """Flatten evaluation results into CSV rows, one per stream plus aggregate."""
    if isinstance(results, EvalResult):
        results = [results]
    out = []
    for res in results:
        for row in (*res.rows, res.aggregate):
            out.append(
                {
                    "method": res.method,
                    "k": str(res.k),
                    "epsilon": _format_value(res.epsilon),
                    "n_adapters": str(res.n_adapters),
                    "seed": str(res.seed),
                    "layer": row.layer,
                    "library": row.library,
                    "accuracy": _format_value(row.accuracy),
                    "containment": _format_value(row.containment),
                    "flops_per_token": _format_value(row.flops_per_token),
                }
            )
    return out


def sweep_csv_rows(points: Iterable[SweepPoint]) -> list[dict[str, str]]:
    """One aggregate CSV row per swept k, FLOPs column from the closed form."""
    out = []
    for p in points:
        res = p.result
        out.append(
            {
                "method": "lag",
                "k": str(p.k),
                "epsilon": _format_value(res.epsilon),
                "n_adapters": str(res.n_adapters),
                "seed": str(res.seed),
                "layer": "all",
                "library": "all",
                "accuracy": _format_value(p.accuracy),
                "containment": _format_value(p.containment),
                "flops_per_token": _format_value(p.flops_per_token),
            }
        )
    return out


def write_csv(path, rows: Iterable[Mapping[str, str]], columns: Sequence[str] = CSV_COLUMNS) -> str:
    """Write rows atomically (temp file then rename) with a mandatory header."""
    path = os.fspath(path)
    parent = os.path.dirname(path) or "."
    os.makedirs(parent, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path

"""Command-line driver for alignment, benchmarking, sweeps, scoring, and costs.

Exit codes: 0 success, 1 validation failure (including bad flags), 2 I/O
failure. Every randomized command takes a seed (default 0) which is echoed
into its CSV output, and file outputs are written atomically, so reruns
with identical flags produce byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from typing import Sequence

from lagroute.core import (
    DEFAULT_SVD_TOLERANCE,
    DEFAULT_TOP_K,
    AdapterLibrary,
    LagError,
    RoutingConfig,
)
from lagroute.linalg import align_library
from lagroute.metrics import average_tasks, cost_model, read_dataset_scores, score_tasks
from lagroute.sim import (
    CSV_COLUMNS,
    DEFAULT_HIDDEN,
    DEFAULT_KNOWLEDGE_RANK,
    DEFAULT_SPECTR_BUDGET,
    DEFAULT_TASK_RANK,
    METHODS,
    evaluate,
    eval_csv_rows,
    generate_benchmark,
    sweep_csv_rows,
    sweep_k,
    write_csv,
)
from lagroute.store import load_library, read_manifest, save_library


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; this tool reserves 2 for I/O failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _write_text_atomic(path: str, text: str) -> None:
    parent = os.path.dirname(os.fspath(path)) or "."
    os.makedirs(parent, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit_text(text: str, out: str | None) -> None:
    if out:
        _write_text_atomic(out, text)
    else:
        sys.stdout.write(text)


def _emit_rows(rows, out: str | None) -> None:
    if out:
        write_csv(out, rows)
        return
    writer = csv.DictWriter(sys.stdout, fieldnames=list(CSV_COLUMNS), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)


def _benchmark_from_args(ns) -> tuple:
    task_rank = ns.rank if ns.rank is not None else DEFAULT_TASK_RANK
    knowledge_rank = ns.rank if ns.rank is not None else DEFAULT_KNOWLEDGE_RANK
    return generate_benchmark(
        n_adapters=ns.n_adapters,
        hidden=ns.hidden,
        task_rank=task_rank,
        knowledge_rank=knowledge_rank,
        layers=ns.layers,
        epsilon=ns.epsilon,
        seed=ns.seed,
    )


def _cmd_align(ns) -> int:
    manifest = read_manifest(ns.input)
    if manifest.get("aligned"):
        sys.stderr.write(f"error: {ns.input} already holds an aligned library; nothing to align\n")
        return 1
    raw = load_library(ns.input)
    if isinstance(raw, AdapterLibrary):
        sys.stderr.write(f"error: {ns.input} already holds an aligned library; nothing to align\n")
        return 1
    tag = manifest.get("library_tag")
    cfg = RoutingConfig(svd_tolerance=ns.tol)
    lib, skipped = align_library(raw, cfg, tag=tag)
    manifest_path = save_library(lib, ns.output)
    report = {
        "aligned": len(lib),
        "skipped": [{"id": s.id, "layer": s.layer, "reason": s.reason} for s in skipped],
        "svd_tolerance": ns.tol,
    }
    _write_text_atomic(
        os.path.join(ns.output, "align_report.json"),
        json.dumps(report, sort_keys=True, indent=2) + "\n",
    )
    sys.stdout.write(
        f"aligned {len(lib)} adapters into {manifest_path} (skipped {len(skipped)})\n"
    )
    return 0


def _cmd_bench(ns) -> int:
    benchmark = _benchmark_from_args(ns)
    cfg = RoutingConfig(k=ns.k)
    result = evaluate(
        benchmark,
        ns.method,
        cfg,
        spectr_budget=DEFAULT_SPECTR_BUDGET,
        allow_large_spectr=ns.allow_large_spectr,
    )
    _emit_rows(eval_csv_rows(result), ns.out)
    return 0


def _cmd_sweep_k(ns) -> int:
    benchmark = _benchmark_from_args(ns)
    try:
        k_values = [int(v) for v in ns.k_values.split(",") if v.strip()]
    except ValueError:
        raise ValueError(f"--k-values must be comma-separated integers, got {ns.k_values!r}")
    if not k_values:
        raise ValueError("--k-values must name at least one k")
    points = sweep_k(benchmark, k_values)
    _emit_rows(sweep_csv_rows(points), ns.out)
    return 0


def _cmd_score(ns) -> int:
    scores = read_dataset_scores(ns.input)
    per_task = score_tasks(scores)
    lines = [f"{task} {value:.4f}" for task, value in per_task.items()]
    lines.append(f"average {average_tasks(scores):.4f}")
    lines.append(f"average_weighted {average_tasks(scores, weighted=True):.4f}")
    _emit_text("\n".join(lines) + "\n", ns.out)
    return 0


def _cmd_accounting(ns) -> int:
    report = cost_model(ns.n, ns.h, ns.r, ns.k)
    _emit_text(report.to_json(), ns.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lagroute", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("align", help="align a raw adapter store into routed form")
    p.add_argument("input", help="directory holding a raw library store")
    p.add_argument("output", help="directory to write the aligned store into")
    p.add_argument(
        "--tol",
        type=float,
        default=DEFAULT_SVD_TOLERANCE,
        help=f"relative singular value cutoff for rank truncation (default {DEFAULT_SVD_TOLERANCE})",
    )
    p.set_defaults(func=_cmd_align)

    def add_benchmark_flags(p) -> None:
        p.add_argument("--n-adapters", type=int, default=50, help="adapters per library (default 50)")
        p.add_argument("--hidden", type=int, default=DEFAULT_HIDDEN, help=f"token width (default {DEFAULT_HIDDEN})")
        p.add_argument(
            "--rank",
            type=int,
            default=None,
            help=f"adapter rank for both libraries (defaults: task {DEFAULT_TASK_RANK}, knowledge {DEFAULT_KNOWLEDGE_RANK})",
        )
        p.add_argument("--layers", type=int, default=2, help="linear layers in the stack (default 2)")
        p.add_argument(
            "--epsilon",
            type=float,
            default=0.0,
            help="fraction of token energy outside the planted subspace, in [0, 1) (default 0.0)",
        )
        p.add_argument("--seed", type=int, default=0, help="benchmark RNG seed, echoed into the CSV (default 0)")
        p.add_argument("--out", default=None, help="CSV output path (default: stdout)")

    p = sub.add_parser("bench", help="run one routing method on a seeded planted benchmark")
    add_benchmark_flags(p)
    p.add_argument("--method", choices=METHODS, default="lag", help="routing method (default lag)")
    p.add_argument("--k", type=int, default=DEFAULT_TOP_K, help=f"filter width for lag (default {DEFAULT_TOP_K})")
    p.add_argument(
        "--allow-large-spectr",
        action="store_true",
        help=f"run exhaustive spectral routing past the {DEFAULT_SPECTR_BUDGET}-adapter budget",
    )
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("sweep-k", help="sweep the filter width k and record accuracy vs cost")
    add_benchmark_flags(p)
    p.add_argument("--k-values", required=True, help="comma-separated filter widths, e.g. 1,2,4,8")
    p.set_defaults(func=_cmd_sweep_k)

    p = sub.add_parser("score", help="normalized task scores from a dataset-score CSV")
    p.add_argument("input", help="CSV with columns dataset,task,size,score,reference")
    p.add_argument("--out", default=None, help="output path (default: stdout)")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("accounting", help="closed-form cost report for (n, h, r, k)")
    p.add_argument("n", type=int, help="number of adapters in the library")
    p.add_argument("h", type=int, help="hidden width")
    p.add_argument("r", type=int, help="adapter rank")
    p.add_argument("k", type=int, help="filter width")
    p.add_argument("--out", default=None, help="JSON output path (default: stdout)")
    p.set_defaults(func=_cmd_accounting)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        return ns.func(ns)
    except LagError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2 if isinstance(exc.__cause__, OSError) else 1
    except ValueError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except OSError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())

"""Command-line driver for checkpoint export.

Exit codes match the engine's convention: 0 success, 1 validation failure
(including bad flags), 2 I/O failure.
"""

from __future__ import annotations

import argparse
import sys
from typing import Sequence

from lagexport.checkpoint import ExportError
from lagexport.export import ExportSpec, export
from lagexport.rules import RulesError, load_rules
from lagexport.store_writer import LIBRARY_TAGS


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; this tool reserves 2 for I/O failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _cmd_export(ns) -> int:
    rules = load_rules(ns.pattern)
    spec = ExportSpec(inputs=tuple(ns.input), rules=rules, tag=ns.tag, alpha=ns.alpha)
    manifest_path, report = export(spec, ns.out)
    sys.stdout.write(
        f"exported {len(report.exported)} adapters into {manifest_path} "
        f"(skipped {len(report.skipped)} tensors)\n"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lagexport", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("export", help="convert adapter checkpoints into a raw store")
    p.add_argument(
        "--input", nargs="+", required=True, metavar="CKPT",
        help="one or more safetensors checkpoint files",
    )
    p.add_argument(
        "--pattern", required=True,
        help="JSON rules file mapping tensor names to adapter slots",
    )
    p.add_argument(
        "--alpha", type=float, default=None,
        help="LoRA alpha; folds alpha/r into B (default: no scaling)",
    )
    p.add_argument(
        "--tag", required=True, choices=LIBRARY_TAGS,
        help="library tag recorded in the store manifest",
    )
    p.add_argument("--out", required=True, help="store directory to write")
    p.set_defaults(func=_cmd_export)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        return ns.func(ns)
    except (ExportError, RulesError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2 if isinstance(exc.__cause__, OSError) else 1
    except OSError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())

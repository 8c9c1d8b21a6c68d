"""Event log records and their JSON-lines encoding.

Every simulated occurrence is one record: a ``dict`` with ``t_ms`` first,
``kind`` second, then the payload fields in the order they were supplied.
Serialization preserves that insertion order so two runs of the same
(scenario, seed) pair produce byte-identical logs.
"""

from __future__ import annotations

import json
from typing import Any, Iterable, Iterator

# Record kinds emitted by the device model.
KEY = "key"
ACTIVITY_START = "activity_start"
ACTIVITY_STOP = "activity_stop"
ACTIVITY_SETTLED = "activity_settled"
ADB = "adb"
INSTALL = "install"
RESTART = "restart"
POPUP = "popup"
SPLASH = "splash"

# Attack-engine records.
SCRIPT_STARTED = "script_started"
SCRIPT_STOPPED = "script_stopped"
CREDENTIAL_CAPTURE = "credential_capture"
REPLICA_HOME = "replica_home"
FIDELITY_RISK = "fidelity_risk"
FIDELITY = "fidelity"
ACCESS_REQUEST = "access_request"
APP_CALL_DENIED = "app_call_denied"

# Hijacked app-session records (dual ledger: server truth vs user view).
CONTENT_SERVED = "content_served"
CONTENT_DISPLAYED = "content_displayed"
REQUEST_SUBMITTED = "request_submitted"
REQUEST_RECEIVED = "request_received"
TRANSFORM_MISS = "transform_miss"

# Relay records.
RELAY_MESSAGE = "relay_message"
RELAY_GAP = "relay_gap"
SESSION_OPENED = "session_opened"
SESSION_CLOSED = "session_closed"

# Defense records.
ALERT = "alert"


def record(t_ms: int, kind: str, **payload: Any) -> dict:
    rec = {"t_ms": int(t_ms), "kind": kind}
    rec.update(payload)
    return rec


def dumps(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":"), ensure_ascii=True)


def write_log(path: str, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps(rec))
            fh.write("\n")


def read_log(path: str) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def of_kind(records: Iterable[dict], *kinds: str) -> Iterator[dict]:
    wanted = set(kinds)
    return (r for r in records if r["kind"] in wanted)


def merge_by_time(*streams: list[dict]) -> list[dict]:
    """Stable merge of per-component logs into one time-ordered log.

    Records at equal ``t_ms`` keep their stream order (stream index, then
    position), so merged output is deterministic.
    """
    tagged = []
    for si, stream in enumerate(streams):
        for pi, rec in enumerate(stream):
            tagged.append((rec["t_ms"], si, pi, rec))
    tagged.sort(key=lambda t: (t[0], t[1], t[2]))
    return [t[3] for t in tagged]

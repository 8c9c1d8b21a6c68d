"""Typed MITM relay between a target-side replica client and an app server.

The core is transport-agnostic: sessions carry two independent FIFO
directions, each message is delayed by a draw from the session's delay
model, and the active mode (passthrough / transform / substitute / drop)
is captured when ``forward`` is called, never retroactively.

Two clocks exist. Virtual time (the default here) is a plain float the
harness advances, so latency bounds hold exactly. The real-time asyncio
host in ``service.py`` reuses this core's bookkeeping against the wall
clock, where a documented 50 ms scheduler tolerance applies.
"""

from __future__ import annotations

import base64
import json
import random
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

from .errors import (
    DuplicateSession,
    InvalidForKind,
    NoDeliveries,
    SessionClosed,
    TransformSetUnknown,
    UnknownSession,
)
from .transforms import TransformRule, apply_display_transform

AUDIO_FRAME_MS = 20
SILENCE_FRAME = b"\x00" * 160
FEED_PAYLOAD_TRUNCATE = 256
REALTIME_SCHED_EPSILON_S = 0.050


class Direction(str, Enum):
    TARGET_TO_SERVER = "target_to_server"
    SERVER_TO_TARGET = "server_to_target"


class MessageKind(str, Enum):
    CREDENTIAL = "credential"
    AUDIO_FRAME = "audio_frame"
    GUI_ACTION = "gui_action"
    CONTENT_UPDATE = "content_update"
    CONTROL = "control"


class Mode(str, Enum):
    PASSTHROUGH = "passthrough"
    TRANSFORM = "transform"
    SUBSTITUTE = "substitute"
    DROP = "drop"


@dataclass
class DelayModel:
    min_s: float
    max_s: float
    distribution: str = "uniform"

    def __post_init__(self) -> None:
        if not (0 <= self.min_s <= self.max_s):
            raise ValueError(f"delay bounds must satisfy 0 <= min <= max, got {self.min_s}..{self.max_s}")

    def draw(self, rng) -> float:
        if self.min_s == self.max_s:
            return self.min_s
        return rng.uniform(self.min_s, self.max_s)


@dataclass
class AudioClip:
    frames: list[bytes]
    label: str
    noise_mixed: bool = False


@dataclass
class AudioClipLibrary:
    clips: dict[str, AudioClip] = field(default_factory=dict)
    matcher: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for intent, clip_id in self.matcher.items():
            if clip_id not in self.clips:
                raise ValueError(f"matcher target {clip_id!r} for intent {intent!r} missing")

    def match(self, intent: Optional[str]) -> Optional[AudioClip]:
        if intent is None:
            return None
        clip_id = self.matcher.get(intent)
        return self.clips.get(clip_id) if clip_id else None


@dataclass
class SessionMode:
    target_to_server: Mode = Mode.PASSTHROUGH
    server_to_target: Mode = Mode.PASSTHROUGH
    transform_set_id: Optional[str] = None
    substitute_clip_id: Optional[str] = None

    def for_direction(self, direction: Direction) -> Mode:
        if direction == Direction.TARGET_TO_SERVER:
            return self.target_to_server
        return self.server_to_target

    def set_direction(self, direction: Direction, mode: Mode) -> None:
        if direction == Direction.TARGET_TO_SERVER:
            self.target_to_server = mode
        else:
            self.server_to_target = mode


@dataclass
class RelayMessage:
    session_id: str
    seq: int
    direction: Direction
    kind: MessageKind
    payload: Any  # bytes for audio, dict for structured payloads
    sent_at: float
    relayed_at: Optional[float] = None
    dropped: bool = False
    injected: bool = False

    @property
    def latency_s(self) -> Optional[float]:
        if self.relayed_at is None:
            return None
        return self.relayed_at - self.sent_at


@dataclass
class DeliveryReceipt:
    seq: int
    delivered: bool
    latency_s: Optional[float]
    payload: Any


class _SessionState:
    def __init__(self, session_id: str, delay: DelayModel, mode: SessionMode):
        self.session_id = session_id
        self.delay = delay
        self.mode = mode
        self.open = True
        self.seq: dict[Direction, int] = {d: 0 for d in Direction}
        self.last_delivery: dict[Direction, float] = {d: 0.0 for d in Direction}
        self.clip_cursor: dict[Direction, int] = {d: 0 for d in Direction}
        self.clip_exhausted_logged: dict[Direction, bool] = {d: False for d in Direction}
        self.delivered: list[RelayMessage] = []
        self.pending: list[RelayMessage] = []


class RelayCore:
    """Session registry plus the forwarding rules, on a virtual clock."""

    def __init__(self, seed: int = 0, rng: Optional[random.Random] = None):
        self.rng = rng or random.Random(seed)
        self.clock_s = 0.0
        self.sessions: dict[str, _SessionState] = {}
        self.transform_sets: dict[str, list[TransformRule]] = {}
        self.library = AudioClipLibrary()
        self.log: list[dict] = []

    # --- time -----------------------------------------------------------

    def advance_to(self, t_s: float) -> None:
        self.clock_s = max(self.clock_s, t_s)
        for sess in self.sessions.values():
            still_pending = []
            for msg in sess.pending:
                if msg.relayed_at is not None and msg.relayed_at <= self.clock_s:
                    sess.delivered.append(msg)
                else:
                    still_pending.append(msg)
            sess.pending = still_pending

    # --- session lifecycle ------------------------------------------------

    def open_session(
        self,
        target_endpoint: str,
        server_endpoint: str,
        delay: DelayModel,
        mode: Optional[SessionMode] = None,
        session_id: Optional[str] = None,
    ) -> str:
        sid = session_id or f"session-{len(self.sessions)}"
        if sid in self.sessions:
            raise DuplicateSession(sid)
        if mode is not None and mode.transform_set_id is not None:
            if mode.transform_set_id not in self.transform_sets:
                raise TransformSetUnknown(mode.transform_set_id)
        self.sessions[sid] = _SessionState(sid, delay, mode or SessionMode())
        self._log(
            "session_opened",
            session=sid,
            target=target_endpoint,
            server=server_endpoint,
            min_s=delay.min_s,
            max_s=delay.max_s,
        )
        return sid

    def close_session(self, session_id: str) -> None:
        sess = self._session(session_id)
        sess.open = False
        self._log("session_closed", session=session_id)

    def _session(self, session_id: str) -> _SessionState:
        if session_id not in self.sessions:
            raise UnknownSession(session_id)
        return self.sessions[session_id]

    def _log(self, kind: str, **payload) -> None:
        rec = {"t_ms": int(round(self.clock_s * 1000)), "kind": kind}
        rec.update(payload)
        self.log.append(rec)

    # --- data plane ---------------------------------------------------------

    def forward(
        self,
        session_id: str,
        direction: Direction,
        kind: MessageKind,
        payload: Any,
        injected: bool = False,
        intent: Optional[str] = None,
    ) -> DeliveryReceipt:
        """Queue one message; mode and delay are fixed at this instant."""
        sess = self._session(session_id)
        if not sess.open:
            raise SessionClosed(session_id)
        seq = sess.seq[direction]
        sess.seq[direction] = seq + 1
        mode = sess.mode.for_direction(direction)
        out_payload = payload
        dropped = False
        if mode == Mode.DROP:
            dropped = True
        elif mode == Mode.TRANSFORM and kind == MessageKind.CONTENT_UPDATE:
            set_id = sess.mode.transform_set_id
            if set_id is None or set_id not in self.transform_sets:
                raise TransformSetUnknown(str(set_id))
            out_payload = apply_display_transform(payload, self.transform_sets[set_id])
        elif mode == Mode.SUBSTITUTE:
            if kind != MessageKind.AUDIO_FRAME:
                raise InvalidForKind("substitute applies to audio frames only")
            out_payload = self._next_substitute_frame(sess, direction, intent)
        delay = sess.delay.draw(self.rng)
        deliver_at = max(self.clock_s + delay, sess.last_delivery[direction])
        msg = RelayMessage(
            session_id=session_id,
            seq=seq,
            direction=direction,
            kind=kind,
            payload=out_payload,
            sent_at=self.clock_s,
            relayed_at=None if dropped else deliver_at,
            dropped=dropped,
            injected=injected,
        )
        if not dropped:
            sess.last_delivery[direction] = deliver_at
            sess.pending.append(msg)
        latency = None if dropped else deliver_at - self.clock_s
        self._log(
            "relay_message",
            session=session_id,
            seq=seq,
            direction=direction.value,
            msg_kind=kind.value,
            dropped=dropped,
            injected=injected,
            latency_s=None if latency is None else round(latency, 6),
            payload_preview=payload_preview(out_payload),
        )
        return DeliveryReceipt(seq=seq, delivered=not dropped, latency_s=latency, payload=out_payload)

    def _next_substitute_frame(
        self, sess: _SessionState, direction: Direction, intent: Optional[str]
    ) -> bytes:
        clip = self.library.match(intent)
        if intent is None or clip is None:
            if intent is not None:
                self._log("relay_gap", session=sess.session_id, intent=intent, reason="no_matching_clip")
            return SILENCE_FRAME
        cursor = sess.clip_cursor[direction]
        sess.clip_cursor[direction] = cursor + 1
        if cursor < len(clip.frames):
            return clip.frames[cursor]
        if not sess.clip_exhausted_logged[direction]:
            sess.clip_exhausted_logged[direction] = True
            self._log("relay_gap", session=sess.session_id, intent=intent, reason="clip_exhausted")
        return SILENCE_FRAME

    # --- control plane ---------------------------------------------------------

    def register_transform_set(self, set_id: str, rules: list[TransformRule]) -> None:
        self.transform_sets[set_id] = list(rules)

    def control(self, session_id: str, command: dict) -> dict:
        """Apply one control command; changes affect only later forwards."""
        sess = self._session(session_id)
        cmd = command.get("cmd")
        args = command.get("args", {})
        if cmd == "set_mode":
            direction = Direction(args["direction"])
            mode = Mode(args["mode"])
            if mode == Mode.SUBSTITUTE:
                sess.mode.substitute_clip_id = args.get("clip_id", sess.mode.substitute_clip_id)
            sess.mode.set_direction(direction, mode)
            return {"ok": True, "result": {"direction": direction.value, "mode": mode.value}}
        if cmd == "set_transform_set":
            set_id = args["transform_set_id"]
            if "rules" in args:
                from .transforms import rules_from_config

                self.register_transform_set(set_id, rules_from_config(set_id, args["rules"]))
            if set_id not in self.transform_sets:
                raise TransformSetUnknown(set_id)
            sess.mode.transform_set_id = set_id
            return {"ok": True, "result": {"transform_set_id": set_id}}
        if cmd == "inject_message":
            direction = Direction(args["direction"])
            kind = MessageKind(args.get("msg_kind", MessageKind.CONTROL.value))
            payload = args.get("payload")
            if isinstance(payload, str) and args.get("payload_is_b64"):
                payload = base64.b64decode(payload)
            receipt = self.forward(session_id, direction, kind, payload, injected=True)
            return {"ok": True, "result": {"seq": receipt.seq}}
        if cmd == "list_pending":
            pend = [
                {"seq": m.seq, "direction": m.direction.value, "deliver_at": m.relayed_at}
                for m in sess.pending
            ]
            return {"ok": True, "result": pend}
        if cmd == "close_session":
            self.close_session(session_id)
            return {"ok": True, "result": {"closed": session_id}}
        raise InvalidForKind(f"unknown control command {cmd!r}")

    # --- metrics ------------------------------------------------------------

    def latency_report(self, session_id: str) -> dict:
        sess = self._session(session_id)
        latencies = sorted(
            m.latency_s for m in sess.delivered + sess.pending if m.latency_s is not None
        )
        if not latencies:
            raise NoDeliveries(session_id)
        return latency_stats(latencies)


def latency_stats(latencies: list[float]) -> dict:
    values = sorted(latencies)
    n = len(values)
    p99_index = min(n - 1, max(0, int(round(0.99 * (n - 1)))))
    return {
        "count": n,
        "min": values[0],
        "max": values[-1],
        "mean": sum(values) / n,
        "p99": values[p99_index],
    }


def substitute_audio(
    core: RelayCore,
    session_id: str,
    inbound: list[bytes],
    intent: Optional[str],
    direction: Direction = Direction.SERVER_TO_TARGET,
    frame_interval_s: float = AUDIO_FRAME_MS / 1000.0,
) -> list[bytes]:
    """Stream ``inbound`` through a substitute-mode direction.

    One outbound frame is produced per inbound frame, paced at the frame
    interval, so the target-side player never starves: clip frames while
    they last, silence afterwards, silence throughout when nothing matches.
    """
    out = []
    for frame in inbound:
        receipt = core.forward(
            session_id, direction, MessageKind.AUDIO_FRAME, frame, intent=intent
        )
        out.append(receipt.payload)
        core.advance_to(core.clock_s + frame_interval_s)
    return out


# --- wire framing -------------------------------------------------------------

_LEN = struct.Struct(">I")


def encode_frame(envelope: dict) -> bytes:
    """4-byte big-endian length prefix + UTF-8 JSON envelope."""
    body = json.dumps(envelope, separators=(",", ":"), ensure_ascii=True).encode("utf-8")
    return _LEN.pack(len(body)) + body


def decode_frames(buffer: bytes) -> tuple[list[dict], bytes]:
    """Split as many complete frames as possible off the front of ``buffer``."""
    out = []
    pos = 0
    while len(buffer) - pos >= _LEN.size:
        (length,) = _LEN.unpack_from(buffer, pos)
        if len(buffer) - pos - _LEN.size < length:
            break
        body = buffer[pos + _LEN.size : pos + _LEN.size + length]
        out.append(json.loads(body.decode("utf-8")))
        pos += _LEN.size + length
    return out, buffer[pos:]


def envelope_for(msg_kind: str, session_id: str, seq: int, direction: str, payload: Any) -> dict:
    env = {"session_id": session_id, "seq": seq, "direction": direction, "kind": msg_kind}
    if isinstance(payload, (bytes, bytearray)):
        env["payload_b64"] = base64.b64encode(bytes(payload)).decode("ascii")
    else:
        env["payload"] = payload
    return env


def payload_from_envelope(env: dict) -> Any:
    if "payload_b64" in env:
        return base64.b64decode(env["payload_b64"])
    return env.get("payload")


def payload_preview(payload: Any, limit: int = FEED_PAYLOAD_TRUNCATE) -> str:
    if isinstance(payload, (bytes, bytearray)):
        text = base64.b64encode(bytes(payload)).decode("ascii")
    else:
        text = json.dumps(payload, separators=(",", ":"), ensure_ascii=True)
    return text[:limit]

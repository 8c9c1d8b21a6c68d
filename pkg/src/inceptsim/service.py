"""Live relay host: TCP data plane plus a WebSocket control plane.

Data plane: clients connect with a hello frame naming their session and
side ("target" or "server"); every later frame is relayed to the opposite
side after a per-message delay draw, FIFO per direction. Framing is the
4-byte big-endian length prefix + JSON envelope shared with the virtual
core.

Control plane: one WebSocket connection multiplexes all sessions with
JSON commands {cmd, session_id, args} -> {ok, result|error}, and a
read-only event feed streaming every relayed envelope with payloads
truncated to 256 bytes.

Real-time deliveries carry a documented scheduler tolerance of 50 ms on
top of the delay model's upper bound.
"""

from __future__ import annotations

import asyncio
import base64
import json
import logging
import random
import struct
from typing import Any, Optional

import websockets

from . import events
from .errors import BindFailed
from .relay import (
    AudioClip,
    AudioClipLibrary,
    DelayModel,
    Direction,
    MessageKind,
    Mode,
    SILENCE_FRAME,
    SessionMode,
    latency_stats,
    payload_preview,
)
from .transforms import apply_display_transform, rules_from_config

log = logging.getLogger("inceptsim.service")

_LEN = struct.Struct(">I")


async def read_frame(reader: asyncio.StreamReader) -> Optional[dict]:
    try:
        header = await reader.readexactly(_LEN.size)
        (length,) = _LEN.unpack(header)
        body = await reader.readexactly(length)
    except (asyncio.IncompleteReadError, ConnectionResetError):
        return None
    return json.loads(body.decode("utf-8"))


def frame_bytes(obj: dict) -> bytes:
    body = json.dumps(obj, separators=(",", ":"), ensure_ascii=True).encode("utf-8")
    return _LEN.pack(len(body)) + body


class LiveSession:
    def __init__(self, session_id: str, delay: DelayModel, mode: SessionMode, service: "RelayService"):
        self.session_id = session_id
        self.delay = delay
        self.mode = mode
        self.service = service
        self.writers: dict[str, Optional[asyncio.StreamWriter]] = {"target": None, "server": None}
        self.seq: dict[Direction, int] = {d: 0 for d in Direction}
        self.last_target_t: dict[Direction, float] = {d: 0.0 for d in Direction}
        self.queues: dict[Direction, asyncio.Queue] = {d: asyncio.Queue() for d in Direction}
        self.pending: dict[Direction, set[int]] = {d: set() for d in Direction}
        self.clip_cursor: dict[Direction, int] = {d: 0 for d in Direction}
        self.latencies: list[float] = []
        self.workers: list[asyncio.Task] = []
        self.open = True

    def start_workers(self) -> None:
        for direction in Direction:
            self.workers.append(asyncio.create_task(self._worker(direction)))

    async def close(self) -> None:
        if not self.open:
            return
        self.open = False
        for task in self.workers:
            task.cancel()
        for side, writer in self.writers.items():
            if writer is not None:
                try:
                    writer.close()
                except Exception:
                    pass
        self.service.log_record(events.SESSION_CLOSED, session=self.session_id)
        await self.service.broadcast({"event": events.SESSION_CLOSED, "session_id": self.session_id})

    def ingress(
        self,
        direction: Direction,
        kind: MessageKind,
        payload: Any,
        intent: Optional[str] = None,
        injected: bool = False,
    ) -> int:
        """Accept one message; the active mode is captured here, not later."""
        loop = asyncio.get_running_loop()
        seq = self.seq[direction]
        self.seq[direction] = seq + 1
        mode = self.mode.for_direction(direction)
        out_payload = payload
        dropped = False
        if mode == Mode.DROP:
            dropped = True
        elif mode == Mode.TRANSFORM and kind == MessageKind.CONTENT_UPDATE:
            set_id = self.mode.transform_set_id
            rules = self.service.transform_sets.get(set_id, [])
            out_payload = apply_display_transform(payload, rules)
        elif mode == Mode.SUBSTITUTE and kind == MessageKind.AUDIO_FRAME:
            out_payload = self._substitute_frame(direction, intent)
        delay = self.delay.draw(self.service.rng)
        item = {
            "seq": seq,
            "kind": kind,
            "payload": out_payload,
            "ingress_t": loop.time(),
            "delay": delay,
            "dropped": dropped,
            "injected": injected,
        }
        if dropped:
            self.service.log_record(
                events.RELAY_MESSAGE,
                session=self.session_id,
                seq=seq,
                direction=direction.value,
                msg_kind=kind.value,
                dropped=True,
                injected=injected,
                latency_s=None,
                payload_preview=payload_preview(out_payload),
            )
        else:
            self.pending[direction].add(seq)
            self.queues[direction].put_nowait(item)
        return seq

    def _substitute_frame(self, direction: Direction, intent: Optional[str]) -> bytes:
        clip = self.service.library.match(intent)
        if clip is None:
            if intent is not None:
                self.service.log_record(
                    events.RELAY_GAP, session=self.session_id, intent=intent, reason="no_matching_clip"
                )
                self.service.broadcast_nowait(
                    {"event": events.RELAY_GAP, "session_id": self.session_id, "intent": intent}
                )
            return SILENCE_FRAME
        cursor = self.clip_cursor[direction]
        self.clip_cursor[direction] = cursor + 1
        if cursor < len(clip.frames):
            return clip.frames[cursor]
        return SILENCE_FRAME

    async def _worker(self, direction: Direction) -> None:
        loop = asyncio.get_running_loop()
        dest_side = "server" if direction == Direction.TARGET_TO_SERVER else "target"
        while True:
            item = await self.queues[direction].get()
            target_t = max(item["ingress_t"] + item["delay"], self.last_target_t[direction])
            self.last_target_t[direction] = target_t
            now = loop.time()
            if target_t > now:
                await asyncio.sleep(target_t - now)
            latency = loop.time() - item["ingress_t"]
            self.latencies.append(latency)
            self.pending[direction].discard(item["seq"])
            envelope = {
                "session_id": self.session_id,
                "seq": item["seq"],
                "direction": direction.value,
                "kind": item["kind"].value,
                "latency_s": round(latency, 6),
                "injected": item["injected"],
            }
            payload = item["payload"]
            if isinstance(payload, (bytes, bytearray)):
                envelope["payload_b64"] = base64.b64encode(bytes(payload)).decode("ascii")
            else:
                envelope["payload"] = payload
            writer = self.writers.get(dest_side)
            if writer is not None:
                try:
                    writer.write(frame_bytes(envelope))
                    await writer.drain()
                except (ConnectionResetError, BrokenPipeError):
                    self.writers[dest_side] = None
            self.service.log_record(
                events.RELAY_MESSAGE,
                session=self.session_id,
                seq=item["seq"],
                direction=direction.value,
                msg_kind=item["kind"].value,
                dropped=False,
                injected=item["injected"],
                latency_s=round(latency, 6),
                payload_preview=payload_preview(payload),
            )
            feed_event = {"event": events.RELAY_MESSAGE}
            feed_event.update(envelope)
            if "payload_b64" in feed_event:
                feed_event["payload_b64"] = feed_event["payload_b64"][:256]
            if "payload" in feed_event:
                feed_event["payload_preview"] = payload_preview(feed_event.pop("payload"))
            await self.service.broadcast(feed_event)


class RelayService:
    """Hosts the data plane and control plane for live sessions."""

    def __init__(self, config: dict):
        self.host = config.get("host", "127.0.0.1")
        self.data_port = int(config.get("data_port", 8750))
        self.control_port = int(config.get("control_port", 8751))
        self.default_delay = DelayModel(
            min_s=float(config.get("delay", {}).get("min_s", 0.4)),
            max_s=float(config.get("delay", {}).get("max_s", 0.6)),
        )
        self.rng = random.Random(config.get("seed", 0))
        self.sessions: dict[str, LiveSession] = {}
        self.transform_sets = {
            set_id: rules_from_config(set_id, entries)
            for set_id, entries in config.get("transforms", {}).items()
        }
        clips = {}
        for clip_id, entry in config.get("clips", {}).items():
            frames = [bytes.fromhex(f) for f in entry.get("frames_hex", [])]
            if not frames:
                frames = [bytes([i % 251]) * 160 for i in range(int(entry.get("frame_count", 50)))]
            clips[clip_id] = AudioClip(frames, entry.get("label", clip_id), entry.get("noise_mixed", False))
        self.library = AudioClipLibrary(clips=clips, matcher=dict(config.get("matcher", {})))
        self.session_configs = {s["session_id"]: s for s in config.get("sessions", [])}
        self.log_path = config.get("log_path")
        self.records: list[dict] = []
        self.subscribers: set = set()
        self._servers: list = []
        self._started_at: Optional[float] = None

    # --- logging / feed ------------------------------------------------------

    def log_record(self, kind: str, **payload) -> None:
        loop = asyncio.get_event_loop()
        t_ms = 0 if self._started_at is None else int((loop.time() - self._started_at) * 1000)
        rec = {"t_ms": t_ms, "kind": kind}
        rec.update(payload)
        self.records.append(rec)
        if self.log_path:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(events.dumps(rec))
                fh.write("\n")

    async def broadcast(self, event: dict) -> None:
        if not self.subscribers:
            return
        text = json.dumps(event, separators=(",", ":"))
        dead = []
        for ws in list(self.subscribers):
            try:
                await ws.send(text)
            except Exception:
                dead.append(ws)
        for ws in dead:
            self.subscribers.discard(ws)

    def broadcast_nowait(self, event: dict) -> None:
        asyncio.ensure_future(self.broadcast(event))

    # --- lifecycle -----------------------------------------------------------

    async def start(self) -> None:
        loop = asyncio.get_running_loop()
        self._started_at = loop.time()
        try:
            data_server = await asyncio.start_server(self._handle_data, self.host, self.data_port)
            control_server = await websockets.serve(self._handle_control, self.host, self.control_port)
        except OSError as exc:
            raise BindFailed(str(exc)) from exc
        self._servers = [data_server, control_server]
        log.info("relay data plane on %s:%d, control on %d", self.host, self.data_port, self.control_port)

    async def stop(self) -> None:
        for session in list(self.sessions.values()):
            await session.close()
        for server in self._servers:
            server.close()
        for server in self._servers:
            try:
                await server.wait_closed()
            except Exception:
                pass

    def _get_or_open(self, session_id: str) -> LiveSession:
        if session_id in self.sessions:
            return self.sessions[session_id]
        cfg = self.session_configs.get(session_id, {})
        delay = self.default_delay
        if "delay" in cfg:
            delay = DelayModel(min_s=float(cfg["delay"]["min_s"]), max_s=float(cfg["delay"]["max_s"]))
        mode_cfg = cfg.get("mode", {})
        mode = SessionMode(
            target_to_server=Mode(mode_cfg.get("target_to_server", "passthrough")),
            server_to_target=Mode(mode_cfg.get("server_to_target", "passthrough")),
            transform_set_id=mode_cfg.get("transform_set_id"),
            substitute_clip_id=mode_cfg.get("clip_id"),
        )
        session = LiveSession(session_id, delay, mode, self)
        session.start_workers()
        self.sessions[session_id] = session
        self.log_record(
            events.SESSION_OPENED, session=session_id, min_s=delay.min_s, max_s=delay.max_s
        )
        self.broadcast_nowait({"event": events.SESSION_OPENED, "session_id": session_id})
        return session

    # --- data plane ------------------------------------------------------------

    async def _handle_data(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        hello = await read_frame(reader)
        if not hello or "hello" not in hello:
            writer.close()
            return
        session_id = hello["hello"]["session_id"]
        side = hello["hello"]["side"]
        if side not in ("target", "server"):
            writer.close()
            return
        session = self._get_or_open(session_id)
        session.writers[side] = writer
        direction = Direction.TARGET_TO_SERVER if side == "target" else Direction.SERVER_TO_TARGET
        while True:
            frame = await read_frame(reader)
            if frame is None:
                break
            if not session.open:
                break
            kind = MessageKind(frame.get("kind", "content_update"))
            payload = frame.get("payload")
            if "payload_b64" in frame:
                payload = base64.b64decode(frame["payload_b64"])
            session.ingress(direction, kind, payload, intent=frame.get("intent"))
        if session.writers.get(side) is writer:
            session.writers[side] = None
        try:
            writer.close()
        except Exception:
            pass

    # --- control plane ------------------------------------------------------------

    async def _handle_control(self, websocket) -> None:
        try:
            async for text in websocket:
                try:
                    command = json.loads(text)
                except json.JSONDecodeError:
                    await websocket.send(json.dumps({"ok": False, "error": "bad_json"}))
                    continue
                response = await self._dispatch(command, websocket)
                await websocket.send(json.dumps(response, separators=(",", ":")))
        finally:
            self.subscribers.discard(websocket)

    async def _dispatch(self, command: dict, websocket) -> dict:
        cmd = command.get("cmd")
        args = command.get("args", {})
        session_id = command.get("session_id")
        try:
            if cmd == "subscribe":
                self.subscribers.add(websocket)
                return {"ok": True, "result": "subscribed"}
            if cmd == "list_sessions":
                return {
                    "ok": True,
                    "result": [
                        {
                            "session_id": sid,
                            "target_to_server": s.mode.target_to_server.value,
                            "server_to_target": s.mode.server_to_target.value,
                            "transform_set_id": s.mode.transform_set_id,
                            "delivered": len(s.latencies),
                        }
                        for sid, s in self.sessions.items()
                    ],
                }
            if session_id is None:
                return {"ok": False, "error": "missing session_id"}
            if session_id not in self.sessions:
                return {"ok": False, "error": f"unknown session {session_id}"}
            session = self.sessions[session_id]
            if cmd == "set_mode":
                direction = Direction(args["direction"])
                mode = Mode(args["mode"])
                if mode == Mode.SUBSTITUTE and "clip_id" in args:
                    session.mode.substitute_clip_id = args["clip_id"]
                session.mode.set_direction(direction, mode)
                return {"ok": True, "result": {"direction": direction.value, "mode": mode.value}}
            if cmd == "set_transform_set":
                set_id = args["transform_set_id"]
                if "rules" in args:
                    self.transform_sets[set_id] = rules_from_config(set_id, args["rules"])
                if set_id not in self.transform_sets:
                    return {"ok": False, "error": f"unknown transform set {set_id}"}
                session.mode.transform_set_id = set_id
                return {"ok": True, "result": {"transform_set_id": set_id}}
            if cmd == "inject_message":
                direction = Direction(args["direction"])
                kind = MessageKind(args.get("msg_kind", "control"))
                payload = args.get("payload")
                if isinstance(payload, str) and args.get("payload_is_b64"):
                    payload = base64.b64decode(payload)
                seq = session.ingress(direction, kind, payload, injected=True)
                return {"ok": True, "result": {"seq": seq}}
            if cmd == "list_pending":
                pending = [
                    {"direction": d.value, "seq": seq}
                    for d in Direction
                    for seq in sorted(session.pending[d])
                ]
                return {"ok": True, "result": pending}
            if cmd == "latency_report":
                if not session.latencies:
                    return {"ok": False, "error": "no deliveries"}
                return {"ok": True, "result": latency_stats(session.latencies)}
            if cmd == "close_session":
                await session.close()
                del self.sessions[session_id]
                return {"ok": True, "result": {"closed": session_id}}
            return {"ok": False, "error": f"unknown command {cmd}"}
        except (KeyError, ValueError) as exc:
            return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}


async def serve_forever(
    config: dict,
    ready: Optional[asyncio.Event] = None,
    shutdown: Optional[asyncio.Event] = None,
) -> None:
    """Run the relay until ``shutdown`` is set (or forever)."""
    service = RelayService(config)
    await service.start()
    if ready is not None:
        ready.set()
    try:
        if shutdown is not None:
            await shutdown.wait()
        else:
            await asyncio.Future()
    finally:
        await service.stop()

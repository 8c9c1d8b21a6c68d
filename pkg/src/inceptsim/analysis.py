"""Pure functions that derive facts from a persisted event log.

Both the runner's metrics and the offline verifier go through these, so
everything reported is recomputable from the log alone.
"""

from __future__ import annotations

from typing import Any, Optional

from . import events
from .device import POPUP_CONFIRM_MS, PopupKind, StopCause


def exit_outcomes(log: list[dict], home_package: str) -> list[dict]:
    """One entry per home-press exit chain found in the log.

    A chain is an exit-confirm popup, the user-exit stop of the exiting app
    within the confirm delay, and the first activity that settles
    afterwards (the landing). Chains cut off by the end of the run have no
    landing and are skipped.
    """
    out = []
    n = len(log)
    for i, rec in enumerate(log):
        if rec["kind"] != events.POPUP or rec.get("popup") != PopupKind.EXIT_CONFIRM.value:
            continue
        press_t = rec["t_ms"]
        exiting = None
        exit_stop_t = None
        for later in log[i + 1 :]:
            if later["t_ms"] > press_t + POPUP_CONFIRM_MS:
                break
            if (
                later["kind"] == events.ACTIVITY_STOP
                and later.get("cause") == StopCause.USER_EXIT.value
            ):
                exiting = later.get("package")
                exit_stop_t = later["t_ms"]
                break
        if exiting is None:
            continue
        landing = None
        landing_t = None
        for later in log[i + 1 :]:
            if later["kind"] == events.ACTIVITY_SETTLED:
                landing = later.get("package")
                landing_t = later["t_ms"]
                break
        if landing is None:
            continue
        out.append(
            {
                "press_t_ms": press_t,
                "exiting": exiting,
                "exit_stop_t_ms": exit_stop_t,
                "landed": landing,
                "landed_t_ms": landing_t,
                "load_s": (landing_t - press_t) / 1000.0,
                "trapped": landing != home_package,
            }
        )
    return out


def script_active_windows(log: list[dict], end_ms: int) -> list[tuple[int, int]]:
    windows = []
    started: Optional[int] = None
    for rec in log:
        if rec["kind"] == events.SCRIPT_STARTED:
            started = rec["t_ms"]
        elif rec["kind"] == events.SCRIPT_STOPPED and started is not None:
            windows.append((started, rec["t_ms"]))
            started = None
    if started is not None:
        windows.append((started, end_ms))
    return windows


def in_windows(t: int, windows: list[tuple[int, int]]) -> bool:
    return any(a <= t <= b for a, b in windows)


def settled_home_intervals(log: list[dict], home_package: str) -> list[int]:
    """Times at which the legitimate home finished loading (stabilized)."""
    return [
        rec["t_ms"]
        for rec in log
        if rec["kind"] == events.ACTIVITY_SETTLED and rec.get("package") == home_package
    ]


def interception_pairs(log: list[dict], home_package: str) -> list[dict]:
    """Exit-chain user-exit stops paired with the first non-home start after.

    Only stops that belong to a home-press chain count (they follow an
    exit-confirm popup within the confirm delay); stops caused by launching
    another app have no popup and are excluded.
    """
    popup_times = [
        r["t_ms"]
        for r in log
        if r["kind"] == events.POPUP and r.get("popup") == PopupKind.EXIT_CONFIRM.value
    ]
    pairs = []
    for i, stop in enumerate(log):
        if stop["kind"] != events.ACTIVITY_STOP or stop.get("cause") != StopCause.USER_EXIT.value:
            continue
        if not any(0 <= stop["t_ms"] - pt <= POPUP_CONFIRM_MS for pt in popup_times):
            continue
        nxt = None
        for later in log[i + 1 :]:
            if later["kind"] == events.ACTIVITY_START and later.get("package") != home_package:
                nxt = later
                break
            if later["kind"] == events.ACTIVITY_SETTLED:
                break  # chain completed without interception
        if nxt is not None:
            pairs.append(
                {
                    "stop_t_ms": stop["t_ms"],
                    "stopped": stop.get("package"),
                    "next_pkg": nxt.get("package"),
                    "next_t_ms": nxt["t_ms"],
                    "gap_ms": nxt["t_ms"] - stop["t_ms"],
                }
            )
    return pairs


def relay_deliveries(log: list[dict]) -> list[dict]:
    return [r for r in log if r["kind"] == events.RELAY_MESSAGE and not r.get("dropped")]


def fifo_violations(log: list[dict]) -> list[str]:
    """Delivered seq numbers must strictly increase per (session, direction)."""
    last: dict[tuple[str, str], int] = {}
    problems = []
    for rec in relay_deliveries(log):
        key = (rec["session"], rec["direction"])
        seq = rec["seq"]
        if key in last and seq <= last[key]:
            problems.append(f"session {key[0]} {key[1]}: seq {seq} after {last[key]}")
        last[key] = seq
    return problems


def latency_violations(
    log: list[dict], bounds: dict[str, tuple[float, float]], epsilon_s: float = 0.0
) -> list[str]:
    problems = []
    for rec in relay_deliveries(log):
        sid = rec["session"]
        if sid not in bounds or rec.get("latency_s") is None:
            continue
        lo, hi = bounds[sid]
        lat = rec["latency_s"]
        if not (lo - 1e-9 <= lat <= hi + epsilon_s + 1e-9):
            problems.append(f"session {sid} seq {rec['seq']}: latency {lat} outside [{lo}, {hi}+{epsilon_s}]")
    return problems


def clock_monotonic(log: list[dict]) -> bool:
    times = [r["t_ms"] for r in log]
    return all(a <= b for a, b in zip(times, times[1:]))


def foreground_overlaps(log: list[dict]) -> list[str]:
    """Replay starts/stops; more than one live activity is a violation."""
    open_pkgs: set[str] = set()
    problems = []
    for rec in log:
        if rec["kind"] == events.ACTIVITY_START:
            open_pkgs.add(rec.get("package"))
            if len(open_pkgs) > 1:
                problems.append(f"t={rec['t_ms']}: simultaneous foreground {sorted(open_pkgs)}")
        elif rec["kind"] == events.ACTIVITY_STOP:
            open_pkgs.discard(rec.get("package"))
        elif rec["kind"] == events.RESTART:
            open_pkgs.clear()
    return problems


def money_value(text: Any) -> Optional[float]:
    try:
        return float(str(text).replace("$", "").replace(",", "").strip())
    except ValueError:
        return None


def triple_checks(log: list[dict]) -> list[dict]:
    """Evaluate input/server/displayed consistency for every submitted form.

    For each (request_submitted, request_received) pair that differs at some
    scalar leaf: the confirmation shown to the user must carry the user's
    original value, not what the server received.
    """
    results = []
    submissions = [r for r in log if r["kind"] == events.REQUEST_SUBMITTED]
    received = [r for r in log if r["kind"] == events.REQUEST_RECEIVED]
    displays = [r for r in log if r["kind"] == events.CONTENT_DISPLAYED]
    for sub in submissions:
        match = next(
            (
                r
                for r in received
                if r["t_ms"] >= sub["t_ms"] and r["app"] == sub["app"] and r["form"] == sub["form"]
            ),
            None,
        )
        if match is None:
            continue
        confirm = next(
            (
                d
                for d in displays
                if d["t_ms"] >= match["t_ms"]
                and d["app"] == sub["app"]
                and d.get("page") == f"{sub['form']}:confirmation"
            ),
            None,
        )
        for selector, user_value in _scalar_leaves(sub["payload"]):
            server_value = _leaf(match["payload"], selector)
            if server_value is None or str(server_value) == str(user_value):
                continue
            displayed = _leaf(confirm["payload"], selector) if confirm else None
            user_num = money_value(user_value)
            disp_num = money_value(displayed)
            results.append(
                {
                    "selector": selector,
                    "input": str(user_value),
                    "server": str(server_value),
                    "displayed": None if displayed is None else str(displayed),
                    "consistent": (
                        disp_num is not None and user_num is not None and disp_num == user_num
                    ),
                }
            )
    return results


def _scalar_leaves(payload: Any, prefix: str = "") -> list[tuple[str, Any]]:
    if isinstance(payload, dict):
        out = []
        for key, value in payload.items():
            path = f"{prefix}.{key}" if prefix else key
            out.extend(_scalar_leaves(value, path))
        return out
    return [(prefix, payload)]


def _leaf(payload: Any, selector: str) -> Any:
    node = payload
    for part in selector.split("."):
        if not isinstance(node, dict) or part not in node:
            return None
        node = node[part]
    return node


def virtual_exit_outcomes(log: list[dict], inception_package: str) -> list[dict]:
    """Per virtual-exit press: did the user stay in the replica home?"""
    out = []
    for i, rec in enumerate(log):
        if rec["kind"] != events.KEY or rec.get("key") != "virtual_exit" or rec.get("edge") != "up":
            continue
        stayed = False
        for later in log[i + 1 : i + 6]:
            if later["kind"] == events.REPLICA_HOME and later.get("package") == inception_package:
                stayed = True
                break
            if later["kind"] in (events.ACTIVITY_STOP, events.ACTIVITY_START):
                break
        out.append({"t_ms": rec["t_ms"], "stayed": stayed})
    return out


def count_kind(log: list[dict], kind: str) -> int:
    return sum(1 for r in log if r["kind"] == kind)

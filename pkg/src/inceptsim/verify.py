"""Offline re-checking of run invariants against the persisted artifacts.

Everything here works from ``events.jsonl`` and ``report.json`` alone, so a
hand-edited log is caught and a healthy run re-validates end to end.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from . import analysis, events
from .defense import DetectorConfig, detect_short_lived_home
from .errors import MissingArtifacts


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.detail}"


def load_artifacts(run_dir: str) -> tuple[list[dict], dict]:
    log_path = os.path.join(run_dir, "events.jsonl")
    report_path = os.path.join(run_dir, "report.json")
    if not os.path.exists(log_path) or not os.path.exists(report_path):
        raise MissingArtifacts(run_dir)
    with open(report_path, "r", encoding="utf-8") as fh:
        report = json.load(fh)
    return events.read_log(log_path), report


def verify_run(run_dir: str) -> list[CheckResult]:
    log, report = load_artifacts(run_dir)
    meta = report.get("meta", {})
    checks = [
        _check_clock(log),
        _check_single_foreground(log),
        _check_trap(log, meta),
        _check_fifo(log),
        _check_latency(log, meta),
        _check_triples(log),
        _check_detector(log, meta),
    ]
    return checks


def _check_clock(log: list[dict]) -> CheckResult:
    ok = analysis.clock_monotonic(log)
    return CheckResult("clock_monotonic", ok, "timestamps non-decreasing" if ok else "out-of-order records")


def _check_single_foreground(log: list[dict]) -> CheckResult:
    problems = analysis.foreground_overlaps(log)
    return CheckResult(
        "single_foreground",
        not problems,
        "at most one live activity" if not problems else "; ".join(problems[:3]),
    )


def _check_trap(log: list[dict], meta: dict) -> CheckResult:
    inception = meta.get("inception_package")
    home = meta.get("home_package")
    if not inception or meta.get("attack_mode") != "script":
        return CheckResult("trap_invariant", True, "no scripted attack in this run; skipped")
    windows = analysis.script_active_windows(log, meta.get("duration_ms", 0))
    outcomes = analysis.exit_outcomes(log, home)
    active = [o for o in outcomes if analysis.in_windows(o["press_t_ms"], windows)]
    trapped = [o for o in active if o["landed"] == inception]
    settled_home = [
        t for t in analysis.settled_home_intervals(log, home) if analysis.in_windows(t, windows)
    ]
    duty = meta.get("duty_cycle") or [1, 0]
    full_duty = int(duty[1]) == 0
    detail = (
        f"{len(trapped)}/{len(active)} exits trapped while script active, "
        f"{len(settled_home)} stabilized home intervals"
    )
    if not full_duty:
        return CheckResult("trap_invariant", True, f"duty-cycled attacker: partial trapping; {detail}")
    window_ms = meta.get("interception_window_ms") or 150
    pairs = analysis.interception_pairs(log, home)
    active_pairs = [p for p in pairs if analysis.in_windows(p["stop_t_ms"], windows)]
    bad_gap = [
        p for p in active_pairs if p["next_pkg"] == inception and p["gap_ms"] > window_ms
    ]
    ok = len(trapped) == len(active) and not settled_home and not bad_gap
    return CheckResult("trap_invariant", ok, detail)


def _check_fifo(log: list[dict]) -> CheckResult:
    if not analysis.relay_deliveries(log):
        return CheckResult("relay_fifo", True, "no relay traffic; skipped")
    problems = analysis.fifo_violations(log)
    return CheckResult(
        "relay_fifo",
        not problems,
        "per-direction seq strictly increasing" if not problems else "; ".join(problems[:3]),
    )


def _check_latency(log: list[dict], meta: dict) -> CheckResult:
    sessions = meta.get("relay_sessions") or {}
    if not sessions or not analysis.relay_deliveries(log):
        return CheckResult("relay_latency_bounds", True, "no relay traffic; skipped")
    bounds = {sid: (cfg["min_s"], cfg["max_s"]) for sid, cfg in sessions.items()}
    problems = analysis.latency_violations(log, bounds, epsilon_s=0.0)
    return CheckResult(
        "relay_latency_bounds",
        not problems,
        "all latencies inside the delay model" if not problems else "; ".join(problems[:3]),
    )


def _check_triples(log: list[dict]) -> CheckResult:
    results = analysis.triple_checks(log)
    if not results:
        return CheckResult("hijack_triple_consistency", True, "no rewritten submissions; skipped")
    bad = [r for r in results if not r["consistent"]]
    detail = f"{len(results) - len(bad)}/{len(results)} rewritten submissions consistent"
    return CheckResult("hijack_triple_consistency", not bad, detail)


def _check_detector(log: list[dict], meta: dict) -> CheckResult:
    det = meta.get("detector")
    if not det or not det.get("enabled", True):
        return CheckResult("detector_agreement", True, "detectors not configured; skipped")
    cfg = DetectorConfig(
        short_lived_home_threshold_ms=det["short_lived_home_threshold_ms"],
        min_occurrences=det["min_occurrences"],
        window_s=det["window_s"],
    )
    recomputed = detect_short_lived_home(log, cfg, meta["home_package"])
    logged = [r for r in log if r["kind"] == events.ALERT]
    same = len(recomputed) == len(logged) and all(
        a.at_ms == r["t_ms"] and a.suspected_package == r["suspected_package"]
        for a, r in zip(recomputed, logged)
    )
    return CheckResult(
        "detector_agreement",
        same,
        f"{len(logged)} logged alerts match recomputation"
        if same
        else f"recomputed {len(recomputed)} alerts, log has {len(logged)}",
    )


def print_table(checks: list[CheckResult]) -> None:
    for check in checks:
        print(check.line())


def verify_exit_code(checks: list[CheckResult]) -> int:
    return 0 if all(c.passed for c in checks) else 1

"""Defense pipeline: prevention gates, trace detectors, restart scheduling,
and the harness that scores a policy against an attack scenario.

Detectors are pure functions over a finished event log. Prevention gates
plug into the device model's launch path. The evaluation harness runs a
scenario twice with the same seed: once as declared and once as a benign
twin with the attack stripped, which is how false positives are measured.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import events
from .device import ActivityRecord, AppDescriptor, Caller, StopCause
from .errors import CallBlockedByPolicy, CertificateRejected

DEFAULT_SHORT_LIVED_THRESHOLD_MS = 2_000
DEFAULT_MIN_OCCURRENCES = 3
DEFAULT_WINDOW_S = 600.0


@dataclass
class DetectorConfig:
    short_lived_home_threshold_ms: int = DEFAULT_SHORT_LIVED_THRESHOLD_MS
    min_occurrences: int = DEFAULT_MIN_OCCURRENCES
    window_s: float = DEFAULT_WINDOW_S

    def __post_init__(self) -> None:
        if self.short_lived_home_threshold_ms <= 0:
            raise ValueError("threshold must be positive")
        if self.min_occurrences < 1:
            raise ValueError("min_occurrences must be >= 1")


@dataclass
class DefensePolicy:
    certificates_enforced: bool = False
    app_calls_validated: bool = False
    restart_period_s: Optional[float] = None
    hard_reset_period_s: Optional[float] = None
    detector_config: DetectorConfig = field(default_factory=DetectorConfig)
    detectors_enabled: bool = True

    def __post_init__(self) -> None:
        if (
            self.restart_period_s is not None
            and self.hard_reset_period_s is not None
            and self.hard_reset_period_s < self.restart_period_s
        ):
            raise ValueError("hard reset period must be >= restart period")


@dataclass
class Alert:
    detector: str
    at_ms: int
    suspected_package: str
    evidence: list[int]  # t_ms references into the event log
    confidence: str = "definite"

    def __post_init__(self) -> None:
        if not self.evidence:
            raise ValueError("alert evidence must be non-empty")

    def to_record(self) -> dict:
        return events.record(
            self.at_ms,
            events.ALERT,
            detector=self.detector,
            suspected_package=self.suspected_package,
            evidence=self.evidence,
            confidence=self.confidence,
        )


@dataclass
class PerceivedTrace:
    entries: list[dict]  # {package_id, approx_start_ms}, ordered by time

    def __post_init__(self) -> None:
        times = [e["approx_start_ms"] for e in self.entries]
        if times != sorted(times):
            raise ValueError("perceived trace must be ordered by approx_start_ms")


@dataclass
class Discrepancy:
    at_ms: int
    system_package: Optional[str]
    perceived_package: Optional[str]


def detect_short_lived_home(log: list[dict], cfg: DetectorConfig, home_package: str) -> list[Alert]:
    """Flag home activities that are force-stopped within the threshold.

    The alert fires the moment the min_occurrences-th qualifying interval
    lands inside the window, naming the package started right after it. One
    alert covers the whole episode: further intervals are part of the same
    attack until the pattern breaks (a gap longer than the window), after
    which a fresh episode can alert again.
    """
    intervals = _short_lived_home_intervals(log, cfg.short_lived_home_threshold_ms, home_package)
    window_ms = int(cfg.window_s * 1000)
    alerts: list[Alert] = []
    recent: list[dict] = []
    episode_alerted = False
    for interval in intervals:
        if recent and interval["start_ms"] - recent[-1]["stop_ms"] > window_ms:
            recent = []
            episode_alerted = False
        recent.append(interval)
        group = recent[-cfg.min_occurrences :]
        if (
            not episode_alerted
            and len(group) == cfg.min_occurrences
            and group[-1]["stop_ms"] - group[0]["start_ms"] <= window_ms
        ):
            alerts.append(
                Alert(
                    detector="short_lived_home",
                    at_ms=group[-1]["stop_ms"],
                    suspected_package=group[-1]["next_start"] or "",
                    evidence=[g["start_ms"] for g in group],
                )
            )
            episode_alerted = True
    return alerts


def _short_lived_home_intervals(
    log: list[dict], threshold_ms: int, home_package: str
) -> list[dict]:
    intervals = []
    open_start: Optional[int] = None
    for i, rec in enumerate(log):
        kind = rec["kind"]
        if kind == events.ACTIVITY_START and rec.get("package") == home_package:
            open_start = rec["t_ms"]
        elif kind == events.ACTIVITY_STOP and rec.get("package") == home_package:
            if open_start is not None and rec.get("cause") == StopCause.FORCE_STOP.value:
                if rec["t_ms"] - open_start <= threshold_ms:
                    next_start = None
                    for later in log[i + 1 :]:
                        if later["kind"] == events.ACTIVITY_START:
                            next_start = later.get("package")
                            break
                    intervals.append(
                        {
                            "start_ms": open_start,
                            "stop_ms": rec["t_ms"],
                            "next_start": next_start,
                        }
                    )
            open_start = None
    return intervals


def compare_traces(
    system: list[ActivityRecord], perceived: PerceivedTrace, slack_ms: int
) -> list[Discrepancy]:
    """Align what the OS logged against what the user remembers.

    Entries pair up when they fall within the slack; a pair with different
    packages is one discrepancy carrying both sides. Leftovers on either
    side become one-sided discrepancies.
    """
    sys_entries = sorted(
        ((r.started_at_ms, r.package_id) for r in system), key=lambda t: t[0]
    )
    per_entries = [(e["approx_start_ms"], e["package_id"]) for e in perceived.entries]
    out: list[Discrepancy] = []
    si = pi = 0
    while si < len(sys_entries) and pi < len(per_entries):
        s_t, s_pkg = sys_entries[si]
        p_t, p_pkg = per_entries[pi]
        if abs(s_t - p_t) <= slack_ms:
            if s_pkg != p_pkg:
                out.append(Discrepancy(at_ms=s_t, system_package=s_pkg, perceived_package=p_pkg))
            si += 1
            pi += 1
        elif s_t < p_t:
            out.append(Discrepancy(at_ms=s_t, system_package=s_pkg, perceived_package=None))
            si += 1
        else:
            out.append(Discrepancy(at_ms=p_t, system_package=None, perceived_package=p_pkg))
            pi += 1
    for s_t, s_pkg in sys_entries[si:]:
        out.append(Discrepancy(at_ms=s_t, system_package=s_pkg, perceived_package=None))
    for p_t, p_pkg in per_entries[pi:]:
        out.append(Discrepancy(at_ms=p_t, system_package=None, perceived_package=p_pkg))
    return out


def validate_app_call(
    caller_pkg: Optional[str],
    callee_pkg: str,
    caller_cert: Optional[str],
    policy: DefensePolicy,
    caller_kind: str = Caller.APP.value,
) -> tuple[str, Optional[str]]:
    """Source validation for app-to-app starts. Returns (verdict, reason)."""
    if not policy.app_calls_validated:
        return "allow", None
    if caller_kind == Caller.SCRIPT.value:
        return "deny", "script_originated_start_without_system_privilege"
    if caller_kind in (Caller.USER.value, Caller.SYSTEM.value):
        return "allow", None
    if caller_cert is None:
        return "deny", "caller_unsigned"
    return "allow", None


def make_launch_gates(policy: DefensePolicy, installed: dict[str, AppDescriptor]):
    """Build launch-path gate callables for Simulator.launch_gates."""
    gates = []

    if policy.certificates_enforced:

        def certificate_gate(caller_kind: str, caller_pkg: Optional[str], app: AppDescriptor) -> None:
            if app.certificate is None:
                raise CertificateRejected(app.package_id)

        gates.append(certificate_gate)

    if policy.app_calls_validated:

        def call_gate(caller_kind: str, caller_pkg: Optional[str], app: AppDescriptor) -> None:
            caller_cert = None
            if caller_pkg is not None and caller_pkg in installed:
                caller_cert = installed[caller_pkg].certificate
            verdict, reason = validate_app_call(
                caller_pkg, app.package_id, caller_cert, policy, caller_kind
            )
            if verdict == "deny":
                raise CallBlockedByPolicy(reason)

        gates.append(call_gate)

    return gates


def restart_scheduler(policy: DefensePolicy, duration_s: float) -> list[dict]:
    """Expand the policy's periods into concrete restart events."""
    out = []
    if policy.restart_period_s:
        period_ms = int(policy.restart_period_s * 1000)
        t = period_ms
        while t <= int(duration_s * 1000):
            out.append({"at_ms": t, "hard": False})
            t += period_ms
    if policy.hard_reset_period_s:
        period_ms = int(policy.hard_reset_period_s * 1000)
        t = period_ms
        while t <= int(duration_s * 1000):
            out.append({"at_ms": t, "hard": True})
            t += period_ms
    out.sort(key=lambda r: (r["at_ms"], r["hard"]))
    # A hard reset at the same instant subsumes the soft restart.
    deduped = []
    for rec in out:
        if deduped and deduped[-1]["at_ms"] == rec["at_ms"]:
            deduped[-1]["hard"] = deduped[-1]["hard"] or rec["hard"]
        else:
            deduped.append(rec)
    return deduped


@dataclass
class DefenseReport:
    attack_succeeded: bool
    detection_latency_s: Optional[float]
    false_positive_alerts: int
    attack_active_fraction: float

    def to_dict(self) -> dict:
        return {
            "attack_succeeded": self.attack_succeeded,
            "detection_latency_s": self.detection_latency_s,
            "false_positive_alerts": self.false_positive_alerts,
            "attack_active_fraction": self.attack_active_fraction,
        }


def attack_active_fraction(log: list[dict], duration_ms: int) -> float:
    """Fraction of the run during which the activation script was live."""
    if duration_ms <= 0:
        return 0.0
    active_ms = 0
    started: Optional[int] = None
    for rec in log:
        if rec["kind"] == events.SCRIPT_STARTED:
            started = rec["t_ms"]
        elif rec["kind"] == events.SCRIPT_STOPPED and started is not None:
            active_ms += rec["t_ms"] - started
            started = None
    if started is not None:
        active_ms += duration_ms - started
    return min(1.0, active_ms / duration_ms)

"""Detectors, prevention gates, restart scheduling, defense evaluation."""

import random

import pytest

from inceptsim import events
from inceptsim.attack import ReplicationStrategy, StrategyKind, build_inception_app, collect_config, run_trap_loop
from inceptsim.defense import (
    Alert,
    DefensePolicy,
    DetectorConfig,
    PerceivedTrace,
    attack_active_fraction,
    compare_traces,
    detect_short_lived_home,
    make_launch_gates,
    restart_scheduler,
    validate_app_call,
)
from inceptsim.device import ActivityRecord, AppDescriptor, AppKind, Caller, InstallVia
from inceptsim.errors import CallBlockedByPolicy, CertificateRejected

from conftest import make_simulator

HOME = "home_env"


# --- independent brute-force oracle -----------------------------------------
# Enumerates every (home start, home force-stop) pair quadratically, then
# applies the episode grouping rules from first principles. Shares no code
# with the detector under test.

def oracle_intervals(log, threshold_ms, home=HOME):
    starts = [
        (i, r) for i, r in enumerate(log)
        if r["kind"] == "activity_start" and r.get("package") == home
    ]
    stops = [
        (i, r) for i, r in enumerate(log)
        if r["kind"] == "activity_stop" and r.get("package") == home and r.get("cause") == "force_stop"
    ]
    intervals = []
    for si, start in starts:
        candidates = []
        for pi, stop in stops:
            if pi <= si:
                continue
            between = [
                r for r in log[si + 1 : pi]
                if r["kind"] in ("activity_start", "activity_stop") and r.get("package") == home
            ]
            if between:
                continue
            candidates.append((pi, stop))
        if not candidates:
            continue
        pi, stop = min(candidates, key=lambda c: c[0])
        if stop["t_ms"] - start["t_ms"] <= threshold_ms:
            nxt = None
            for r in log[pi + 1 :]:
                if r["kind"] == "activity_start":
                    nxt = r.get("package")
                    break
            intervals.append({"start": start["t_ms"], "stop": stop["t_ms"], "next": nxt})
    return intervals


def oracle_alerts(log, cfg, home=HOME):
    intervals = oracle_intervals(log, cfg.short_lived_home_threshold_ms, home)
    window_ms = int(cfg.window_s * 1000)
    alerts = []
    recent = []
    alerted = False
    for iv in intervals:
        if recent and iv["start"] - recent[-1]["stop"] > window_ms:
            recent = []
            alerted = False
        recent.append(iv)
        group = recent[-cfg.min_occurrences :]
        if (
            not alerted
            and len(group) == cfg.min_occurrences
            and group[-1]["stop"] - group[0]["start"] <= window_ms
        ):
            alerts.append({"at_ms": group[-1]["stop"], "suspected": group[-1]["next"] or ""})
            alerted = True
    return alerts


def synthetic_trace(rng):
    """Random log mixing benign home visits with attack-style interceptions."""
    log = []
    t = 0
    inception = "com.inception.app"
    for _ in range(rng.randint(1, 20)):
        t += rng.randint(500, 60_000)
        style = rng.random()
        if style < 0.45:
            # interception: short-lived home, then the hijack app starts
            log.append({"t_ms": t, "kind": "activity_start", "package": HOME, "caller": "system"})
            t += rng.randint(50, 4_000)
            log.append({"t_ms": t, "kind": "activity_stop", "package": HOME, "cause": "force_stop"})
            log.append({"t_ms": t, "kind": "activity_start", "package": inception, "caller": "script"})
            t += rng.randint(100, 2_000)
            log.append({"t_ms": t, "kind": "activity_stop", "package": inception, "cause": "user_exit"})
        elif style < 0.85:
            # benign visit: home starts, settles, user moves on
            log.append({"t_ms": t, "kind": "activity_start", "package": HOME, "caller": "system"})
            t += rng.randint(5_000, 120_000)
            log.append({"t_ms": t, "kind": "activity_stop", "package": HOME, "cause": "user_exit"})
            log.append({"t_ms": t, "kind": "activity_start", "package": "vrchat", "caller": "user"})
            t += rng.randint(1_000, 30_000)
            log.append({"t_ms": t, "kind": "activity_stop", "package": "vrchat", "cause": "user_exit"})
        else:
            log.append({"t_ms": t, "kind": "adb", "verb": "dumpsys", "args": ""})
    return log


class TestShortLivedHomeDetector:
    def trap_log(self, exits=5, duty=(1, 0)):
        sim = make_simulator(seed=4)
        cfg = collect_config(sim)
        strategies = {p: ReplicationStrategy(StrategyKind.DIRECT_CALL) for p in cfg.package_list if p != HOME}
        app = build_inception_app(cfg, strategies)
        sim.install_app(app.descriptor, InstallVia.ADB)
        trace = run_trap_loop(sim, app, True, exits, random.Random(4), duty_cycle=duty)
        return trace.records, app

    def test_trap_run_one_alert_names_inception(self):
        log, app = self.trap_log(exits=5)
        cfg = DetectorConfig(short_lived_home_threshold_ms=2_000, min_occurrences=3, window_s=600)
        alerts = detect_short_lived_home(log, cfg, HOME)
        assert len(alerts) == 1
        assert alerts[0].suspected_package == app.descriptor.package_id
        oracle = oracle_alerts(log, cfg)
        assert [(a.at_ms, a.suspected_package) for a in alerts] == [
            (o["at_ms"], o["suspected"]) for o in oracle
        ]

    def test_benign_trace_no_alerts(self):
        sim = make_simulator(seed=6)
        for _ in range(6):
            sim.launch_app("vrchat", Caller.USER)
            sim.press_home()
            sim.run_until_idle()
        cfg = DetectorConfig()
        assert detect_short_lived_home(sim.log, cfg, HOME) == []

    def test_duty_cycled_attacker_can_evade(self):
        # intercept 1 of 3 exits; with min_occurrences=3 inside a narrow
        # window the pattern never completes
        log, _ = self.trap_log(exits=9, duty=(1, 2))
        cfg = DetectorConfig(short_lived_home_threshold_ms=2_000, min_occurrences=3, window_s=30)
        got = [(a.at_ms, a.suspected_package) for a in detect_short_lived_home(log, cfg, HOME)]
        want = [(o["at_ms"], o["suspected"]) for o in oracle_alerts(log, cfg)]
        assert got == want == []

    def test_oracle_agreement_on_1000_random_traces(self):
        disagreements = 0
        for seed in range(1_000):
            rng = random.Random(seed)
            log = synthetic_trace(rng)
            cfg = DetectorConfig(
                short_lived_home_threshold_ms=rng.choice([1_000, 2_000, 5_000]),
                min_occurrences=rng.choice([1, 2, 3]),
                window_s=rng.choice([30.0, 120.0, 600.0]),
            )
            got = [(a.at_ms, a.suspected_package) for a in detect_short_lived_home(log, cfg, HOME)]
            want = [(o["at_ms"], o["suspected"]) for o in oracle_alerts(log, cfg)]
            if got != want:
                disagreements += 1
        assert disagreements == 0

    def test_evidence_non_empty(self):
        with pytest.raises(ValueError):
            Alert(detector="d", at_ms=0, suspected_package="p", evidence=[])


class TestCompareTraces:
    def test_mismatched_pair(self):
        system = [ActivityRecord("com.inception.app", started_at_ms=1_000)]
        perceived = PerceivedTrace([{"package_id": "vrchat", "approx_start_ms": 1_200}])
        got = compare_traces(system, perceived, slack_ms=1_000)
        assert len(got) == 1
        assert got[0].system_package == "com.inception.app"
        assert got[0].perceived_package == "vrchat"

    def test_identical_traces(self):
        system = [ActivityRecord("vrchat", started_at_ms=1_000)]
        perceived = PerceivedTrace([{"package_id": "vrchat", "approx_start_ms": 1_000}])
        assert compare_traces(system, perceived, slack_ms=500) == []

    def test_noise_within_slack_benign(self):
        # noise-injection oracle: jitter each timestamp by +-500 ms and keep
        # the same packages; with slack 1000 nothing should flag
        rng = random.Random(3)
        system = [
            ActivityRecord(pkg, started_at_ms=t)
            for pkg, t in [("vrchat", 1_000), ("browser", 30_000), ("beat_saber", 95_000)]
        ]
        perceived = PerceivedTrace(
            [
                {"package_id": r.package_id, "approx_start_ms": r.started_at_ms + rng.randint(-500, 500)}
                for r in system
            ]
        )
        assert compare_traces(system, perceived, slack_ms=1_000) == []

    def test_one_sided_entries(self):
        system = [ActivityRecord("com.inception.app", started_at_ms=1_000)]
        perceived = PerceivedTrace([{"package_id": "vrchat", "approx_start_ms": 99_000}])
        got = compare_traces(system, perceived, slack_ms=1_000)
        assert {(d.system_package, d.perceived_package) for d in got} == {
            ("com.inception.app", None),
            (None, "vrchat"),
        }


class TestValidateAppCall:
    POLICY = DefensePolicy(app_calls_validated=True)

    def test_script_originated_denied(self):
        verdict, reason = validate_app_call(None, "com.inception.app", None, self.POLICY, caller_kind="script")
        assert verdict == "deny" and "script" in reason

    def test_signed_app_to_app_allowed(self):
        verdict, _ = validate_app_call("beat_saber", "vrchat", "store", self.POLICY, caller_kind="app")
        assert verdict == "allow"

    def test_validation_off_allows_everything(self):
        policy = DefensePolicy(app_calls_validated=False)
        verdict, _ = validate_app_call(None, "x", None, policy, caller_kind="script")
        assert verdict == "allow"

    def test_unsigned_app_caller_denied(self):
        verdict, reason = validate_app_call("com.inception.app", "vrchat", None, self.POLICY, caller_kind="app")
        assert verdict == "deny" and reason == "caller_unsigned"


class TestLaunchGates:
    def test_certificate_gate_blocks_unsigned(self):
        sim = make_simulator(seed=8)
        policy = DefensePolicy(certificates_enforced=True)
        sim.launch_gates = make_launch_gates(policy, sim.state.installed)
        unsigned = AppDescriptor("com.inception.app", "x", AppKind.APP_3D, None, False, 0)
        sim.install_app(unsigned, InstallVia.ADB)
        with pytest.raises(CertificateRejected):
            sim.launch_app("com.inception.app", Caller.USER)
        assert sim.state.foreground() is None
        assert [r for r in sim.log if r["kind"] == events.APP_CALL_DENIED]

    def test_call_gate_blocks_script(self):
        sim = make_simulator(seed=8)
        policy = DefensePolicy(app_calls_validated=True)
        sim.launch_gates = make_launch_gates(policy, sim.state.installed)
        with pytest.raises(CallBlockedByPolicy):
            sim.launch_app("vrchat", Caller.SCRIPT)

    def test_signed_user_launch_allowed(self):
        sim = make_simulator(seed=8)
        policy = DefensePolicy(certificates_enforced=True, app_calls_validated=True)
        sim.launch_gates = make_launch_gates(policy, sim.state.installed)
        sim.launch_app("vrchat", Caller.USER)
        assert sim.state.foreground_package() == "vrchat"

    def test_cert_gate_unsigned_never_foreground_in_trap(self):
        sim = make_simulator(seed=12)
        policy = DefensePolicy(certificates_enforced=True)
        sim.launch_gates = make_launch_gates(policy, sim.state.installed)
        cfg = collect_config(sim)
        strategies = {p: ReplicationStrategy(StrategyKind.DIRECT_CALL) for p in cfg.package_list if p != HOME}
        app = build_inception_app(cfg, strategies)
        sim.install_app(app.descriptor, InstallVia.ADB)
        trace = run_trap_loop(sim, app, True, 8, random.Random(12))
        starts = [r for r in trace.records if r["kind"] == events.ACTIVITY_START]
        assert not any(r["package"] == app.descriptor.package_id for r in starts)
        assert all(e.landed_package == HOME for e in trace.exits)


class TestRestartScheduler:
    def test_period_3600_over_4_hours(self):
        policy = DefensePolicy(restart_period_s=3_600)
        plan = restart_scheduler(policy, 4 * 3_600)
        assert len(plan) == 4
        assert [p["at_ms"] for p in plan] == [3_600_000 * k for k in range(1, 5)]
        assert not any(p["hard"] for p in plan)

    def test_no_period_empty(self):
        assert restart_scheduler(DefensePolicy(), 3_600) == []

    def test_hard_reset_included(self):
        policy = DefensePolicy(restart_period_s=600, hard_reset_period_s=1_200)
        plan = restart_scheduler(policy, 1_200)
        hard = [p for p in plan if p["hard"]]
        assert len(hard) == 1 and hard[0]["at_ms"] == 1_200_000

    def test_invalid_period_combo(self):
        with pytest.raises(ValueError):
            DefensePolicy(restart_period_s=600, hard_reset_period_s=300)


class TestActiveFraction:
    def test_full_run_active(self):
        log = [{"t_ms": 0, "kind": events.SCRIPT_STARTED, "process": "s"}]
        assert attack_active_fraction(log, 10_000) == 1.0

    def test_partial(self):
        log = [
            {"t_ms": 0, "kind": events.SCRIPT_STARTED, "process": "s"},
            {"t_ms": 2_500, "kind": events.SCRIPT_STOPPED, "process": "s"},
        ]
        assert attack_active_fraction(log, 10_000) == 0.25

    def test_empty(self):
        assert attack_active_fraction([], 10_000) == 0.0

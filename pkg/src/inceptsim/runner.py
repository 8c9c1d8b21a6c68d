"""Scenario orchestration: wires the device, attack, transforms, relay and
defense together, executes the timed user script deterministically, and
persists the event log plus the run report.
"""

from __future__ import annotations

import json
import logging
import os
import random
import time
from dataclasses import dataclass
from typing import Any, Optional

from . import analysis, events
from .appsession import AppServerStub, AppSession
from .attack import (
    ActivationScript,
    InceptionApp,
    StrategyKind,
    StrategyRuntime,
    alt_mode_step,
    build_inception_app,
    choose_background_guess,
    collect_config,
    fidelity_report,
    request_access,
)
from .defense import (
    DefensePolicy,
    DefenseReport,
    attack_active_fraction,
    compare_traces,
    detect_short_lived_home,
    make_launch_gates,
    restart_scheduler,
    PerceivedTrace,
)
from .device import (
    AppKind,
    Caller,
    DeviceState,
    InstallVia,
    KeyEdge,
    KeyName,
    Simulator,
)
from .errors import InceptSimError, NoForegroundApp
from .relay import (
    Direction,
    MessageKind,
    Mode,
    RelayCore,
    SessionMode,
    latency_stats,
)
from .scenario import RelayConfig, Scenario, load_scenario
from .transforms import Credential

log = logging.getLogger("inceptsim")

SETTLE_HORIZON_MS = 30_000


def component_rng(seed: int, name: str) -> random.Random:
    return random.Random(f"{seed}:{name}")


@dataclass
class RunResult:
    scenario: Scenario
    log: list[dict]
    metrics: dict
    meta: dict
    perceived: list[dict]


@dataclass
class RunReport:
    event_log_path: str
    metrics: dict
    wall_time_s: float
    meta: dict

    def to_dict(self) -> dict:
        return {
            "event_log_path": self.event_log_path,
            "metrics": self.metrics,
            "wall_time_s": self.wall_time_s,
            "meta": self.meta,
        }


class _AttackContext:
    def __init__(self):
        self.app: Optional[InceptionApp] = None
        self.script: Optional[ActivationScript] = None
        self.runtime: Optional[StrategyRuntime] = None
        self.mode: Optional[str] = None
        self.granted = False


class ScriptDriver:
    """Executes the scenario's timed user actions against the simulator."""

    def __init__(
        self,
        sim: Simulator,
        scenario: Scenario,
        attack_ctx: _AttackContext,
        behavior_rng: random.Random,
    ):
        self.sim = sim
        self.scenario = scenario
        self.ctx = attack_ctx
        self.rng = behavior_rng
        self.perceived: list[dict] = []
        self.sessions: dict[str, AppSession] = {}
        self.servers: dict[str, AppServerStub] = {}
        self.active_session: Optional[AppSession] = None
        self.triples: list[dict] = []
        self.home_pkg = sim.state.home_package()

    # --- session plumbing -------------------------------------------------

    def _server_for(self, app_id: str) -> AppServerStub:
        if app_id not in self.servers:
            content = self.scenario.app_content.get(app_id, {})
            self.servers[app_id] = AppServerStub(app_id, content)
        return self.servers[app_id]

    def _session_for(self, app_id: str) -> AppSession:
        trapped = (
            self.ctx.app is not None
            and self.sim.state.foreground_package() == self.ctx.app.descriptor.package_id
        )
        rules = []
        if trapped:
            strategy = self.ctx.app.strategies.get(app_id)
            if strategy is not None and strategy.kind == StrategyKind.LOCAL_API_SIM:
                set_id = strategy.transform_set_id
                if set_id is not None:
                    rules = self.scenario.transforms.get(set_id, [])
        key = f"{app_id}:{'hijacked' if rules else 'benign'}"
        if key not in self.sessions:
            self.sessions[key] = AppSession(
                self.sim,
                self._server_for(app_id),
                rules,
                credential_salt=str(self.scenario.seed),
            )
        self.active_session = self.sessions[key]
        return self.active_session

    # --- user actions --------------------------------------------------------

    def _launch(self, package: str) -> None:
        self.perceived.append({"package_id": package, "approx_start_ms": self.sim.now()})
        fg = self.sim.state.foreground_package()
        if self.ctx.runtime is not None and fg == self.ctx.app.descriptor.package_id:
            credential = None
            cred_cfg = self.scenario.attack.credentials.get(package) if self.scenario.attack else None
            if cred_cfg:
                credential = Credential(package, cred_cfg["username"], cred_cfg["secret"])
            self.ctx.runtime.open_app(package, credential)
            return
        try:
            self.sim.launch_app(package, Caller.USER)
        except InceptSimError:
            pass  # denial already logged; user stays where they were

    def _press_home(self) -> Optional[int]:
        try:
            return self.sim.press_home()
        except NoForegroundApp:
            return None

    def _virtual_exit(self) -> None:
        self.sim.emit(events.KEY, key=KeyName.VIRTUAL_EXIT.value, edge=KeyEdge.DOWN.value)
        up = self.sim.emit(events.KEY, key=KeyName.VIRTUAL_EXIT.value, edge=KeyEdge.UP.value)
        if self.ctx.app is None:
            return
        actions = alt_mode_step(up, self.sim.state.foreground_package(), self.ctx.app)
        for action in actions:
            if action.verb == "show_replica_home":
                self.sim.emit(events.REPLICA_HOME, package=action.target, shown=True)

    def _settle_wait(self, limit_ms: int = SETTLE_HORIZON_MS) -> None:
        """Advance until the pending chain lands somewhere (a new settle)."""
        mark = len(self.sim.log)
        deadline = self.sim.now() + limit_ms
        while self.sim._queue and self.sim._queue[0][0] <= deadline:
            self.sim.advance_to(self.sim._queue[0][0])
            if any(r["kind"] == events.ACTIVITY_SETTLED for r in self.sim.log[mark:]):
                break
            mark = len(self.sim.log)

    def _exit_cycle(self, package: str, dwell_ms: int) -> None:
        self._launch(package)
        self.sim.advance_to(self.sim.now() + dwell_ms)
        self._press_home()
        self._settle_wait()

    # --- step dispatch ----------------------------------------------------------

    def execute(self) -> None:
        for step in self.scenario.script:
            if "at_s" in step:
                self.sim.advance_to(int(float(step["at_s"]) * 1000))
            verb = step["do"]
            if verb in ("launch", "open_app_button"):
                self._launch(step["package"])
            elif verb == "press_home":
                self._press_home()
            elif verb == "virtual_exit":
                self._virtual_exit()
            elif verb == "view_page":
                self._session_for(step["package"]).view_page(step["page"])
            elif verb == "type":
                session = self.active_session
                if "package" in step:
                    session = self._session_for(step["package"])
                if session is not None:
                    session.type_text(step["field"], step["text"])
            elif verb == "click":
                session = self.active_session
                if "package" in step:
                    session = self._session_for(step["package"])
                if session is not None:
                    session.click(step["field"])
            elif verb == "submit_form":
                session = self.active_session
                if "package" in step:
                    session = self._session_for(step["package"])
                if session is not None:
                    session.submit_form(step["form"])
            elif verb == "dwell":
                self.sim.advance_to(self.sim.now() + int(float(step["seconds"]) * 1000))
            elif verb == "random_exits":
                self._random_exits(int(step["count"]))
            elif verb == "exit_cycles":
                count = int(step.get("count", 1))
                dwell_ms = int(float(step.get("dwell_s", 2.0)) * 1000)
                for _ in range(count):
                    self._exit_cycle(step["package"], dwell_ms)
            elif verb == "restart":
                self.sim.restart(hard=bool(step.get("hard", False)))
            else:
                raise InceptSimError(f"unknown script verb {verb!r}")
        for session in self.sessions.values():
            self.triples.extend(t.to_dict() for t in session.triples)

    def _random_exits(self, count: int) -> None:
        inception_pkg = self.ctx.app.descriptor.package_id if self.ctx.app else None
        choices = [
            p
            for p, a in self.sim.state.installed.items()
            if a.kind != AppKind.HOME and p != inception_pkg
        ]
        for _ in range(count):
            target = self.rng.choice(choices)
            dwell = self.rng.randint(2_000, 15_000)
            self._exit_cycle(target, dwell)


def _bootstrap_attack(sim: Simulator, scenario: Scenario, ctx: _AttackContext) -> None:
    """Wireless-debug bootstrap: request access, harvest config, install, arm."""
    cfg = scenario.attack
    ctx.mode = cfg.mode
    verdict = request_access(sim, cfg.access, component_rng(scenario.seed, "access"))
    sim.emit(events.ACCESS_REQUEST, mode=cfg.access.mode.value, result=verdict)
    ctx.granted = verdict == "granted"
    if not ctx.granted:
        return
    headset = collect_config(sim)
    app = build_inception_app(headset, cfg.strategies, cfg.fidelity, cfg.package_id)
    sim.install_app(app.descriptor, InstallVia.ADB)
    report = fidelity_report(app, sim)
    sim.emit(events.FIDELITY, package=app.descriptor.package_id, discrepancies=report.discrepancies)
    script = ActivationScript(sim, app, cfg.interception_window_ms, cfg.duty_cycle)
    script.start()
    ctx.app = app
    ctx.script = script
    ctx.runtime = StrategyRuntime(sim, app, credential_salt=str(scenario.seed))
    if cfg.reactivation_delay_s is not None:
        _arm_reactivation(sim, script, cfg.reactivation_delay_s)


def _arm_reactivation(sim: Simulator, script: ActivationScript, delay_s: float) -> None:
    """After every restart the attacker re-runs the script once the device
    has been back up for ``delay_s`` (if the payload app survived)."""

    original_restart = sim.restart

    def restart_with_reactivation(hard: bool) -> None:
        original_restart(hard)
        if hard or script.app.descriptor.package_id not in sim.state.installed:
            return
        sim.schedule(sim.now() + int(delay_s * 1000), script.rearm_after_restart)

    sim.restart = restart_with_reactivation  # type: ignore[method-assign]


def _bootstrap_alt_store(sim: Simulator, scenario: Scenario, ctx: _AttackContext, fidelity: dict) -> None:
    """Store-published variant: user-installed app, no script, guessed home."""
    from .attack import HeadsetConfig

    cfg = scenario.attack
    ctx.mode = cfg.mode
    headset = HeadsetConfig(
        background_apk_id=fidelity.get("background_apk_id", sim.state.home_background_id),
        package_list=list(sim.state.installed),
        recent_apps=list(sim.state.recent_apps),
    )
    app = build_inception_app(headset, cfg.strategies, fidelity, cfg.package_id)
    sim.install_app(app.descriptor, InstallVia.STORE)
    report = fidelity_report(app, sim)
    sim.emit(events.FIDELITY, package=app.descriptor.package_id, discrepancies=report.discrepancies)
    ctx.app = app
    ctx.runtime = StrategyRuntime(sim, app, credential_salt=str(scenario.seed))


def _schedule_policy_restarts(sim: Simulator, policy: DefensePolicy, duration_s: float) -> None:
    plan = restart_scheduler(policy, duration_s)

    def make_entry(entry: dict):
        def fire() -> None:
            sim.restart(hard=entry["hard"])
            # restart cleared the queue; re-arm the remaining plan
            for later in plan:
                if later["at_ms"] > entry["at_ms"]:
                    sim.schedule(later["at_ms"], make_entry(later))
                    break

        return fire

    if plan:
        sim.schedule(plan[0]["at_ms"], make_entry(plan[0]))


def drive_relay(relay_cfg: RelayConfig, transforms: dict, seed: int) -> tuple[list[dict], dict]:
    """Run the declared relay traffic on the virtual clock."""
    core = RelayCore(rng=component_rng(seed, "relay"))
    core.library = relay_cfg.library
    for set_id, rules in transforms.items():
        core.register_transform_set(set_id, rules)
    sends: list[tuple[float, int, str, Direction, MessageKind, Any, Optional[str]]] = []
    order = 0
    for sess in relay_cfg.sessions:
        mode_cfg = sess.mode or {}
        mode = SessionMode(
            target_to_server=Mode(mode_cfg.get("target_to_server", "passthrough")),
            server_to_target=Mode(mode_cfg.get("server_to_target", "passthrough")),
            transform_set_id=mode_cfg.get("transform_set_id"),
            substitute_clip_id=mode_cfg.get("clip_id"),
        )
        core.advance_to(sess.start_at_s)
        core.open_session("target", "server", sess.delay, mode, session_id=sess.session_id)
        for entry in sess.traffic:
            count = int(entry.get("count", 1))
            interval = float(entry.get("interval_s", 0.02))
            start = sess.start_at_s + float(entry.get("start_at_s", 0.0))
            direction = Direction(entry["direction"])
            kind = MessageKind(entry["msg_kind"])
            for k in range(count):
                payload = entry.get("payload")
                if payload is None and kind == MessageKind.AUDIO_FRAME:
                    payload = bytes([k % 251]) * 160
                sends.append(
                    (start + k * interval, order, sess.session_id, direction, kind, payload, entry.get("intent"))
                )
                order += 1
    sends.sort(key=lambda s: (s[0], s[1]))
    for at_s, _, sid, direction, kind, payload, intent in sends:
        core.advance_to(at_s)
        core.forward(sid, direction, kind, payload, intent=intent)
    if sends:
        last_delivery = max(
            (m.relayed_at or 0.0)
            for sess_state in core.sessions.values()
            for m in sess_state.pending + sess_state.delivered
        )
        core.advance_to(last_delivery)
    stats = {}
    for sid, sess_state in core.sessions.items():
        delivered = [m.latency_s for m in sess_state.delivered if m.latency_s is not None]
        stats[sid] = latency_stats(delivered) if delivered else None
        core.close_session(sid)
    return core.log, stats


def simulate(scenario: Scenario) -> RunResult:
    """One deterministic virtual-time run of a parsed scenario."""
    state = DeviceState(
        installed={a.package_id: a for a in scenario.device.apps},
        developer_mode=scenario.device.developer_mode,
        home_background_id=scenario.device.home_background_id,
        settings=scenario.device.settings,
        rng_seed=scenario.seed,
    )
    sim = Simulator(
        state,
        scenario.device.load_model,
        seed=f"{scenario.seed}:device",
        boot_duration_s=scenario.device.boot_duration_s,
        factory_packages=set(scenario.device.factory_packages or [state.home_package(), "browser"]),
    )
    policy = scenario.defense
    if policy is not None:
        sim.launch_gates = make_launch_gates(policy, state.installed)
        _schedule_policy_restarts(sim, policy, scenario.duration_s)
    ctx = _AttackContext()
    if scenario.attack is not None:
        if scenario.attack.mode == "script":
            _bootstrap_attack(sim, scenario, ctx)
        else:
            fidelity = dict(scenario.attack.fidelity)
            if scenario.attack.background_candidates:
                fidelity.setdefault(
                    "background_apk_id",
                    choose_background_guess(scenario.attack.background_candidates, scenario.seed),
                )
            _bootstrap_alt_store(sim, scenario, ctx, fidelity)
    driver = ScriptDriver(sim, scenario, ctx, component_rng(scenario.seed, "behavior"))
    driver.execute()
    duration_ms = int(scenario.duration_s * 1000)
    sim.advance_to(duration_ms)
    device_log = list(sim.log)

    relay_log: list[dict] = []
    relay_stats: dict = {}
    if scenario.relay is not None:
        relay_log, relay_stats = drive_relay(scenario.relay, scenario.transforms, scenario.seed)

    alert_records: list[dict] = []
    if policy is not None and policy.detectors_enabled:
        home_pkg = next(a.package_id for a in scenario.device.apps if a.kind == AppKind.HOME)
        alerts = detect_short_lived_home(device_log, policy.detector_config, home_pkg)
        alert_records = [a.to_record() for a in alerts]

    merged = events.merge_by_time(device_log, relay_log, alert_records)
    metrics = _compute_metrics(merged, scenario, driver, relay_stats, duration_ms)
    meta = _build_meta(scenario, ctx, duration_ms)
    return RunResult(
        scenario=scenario, log=merged, metrics=metrics, meta=meta, perceived=driver.perceived
    )


def _build_meta(scenario: Scenario, ctx: _AttackContext, duration_ms: int) -> dict:
    home_pkg = next(a.package_id for a in scenario.device.apps if a.kind == AppKind.HOME)
    meta: dict[str, Any] = {
        "scenario": scenario.name,
        "seed": scenario.seed,
        "duration_ms": duration_ms,
        "home_package": home_pkg,
        "inception_package": scenario.attack.package_id if scenario.attack else None,
        "attack_mode": scenario.attack.mode if scenario.attack else None,
        "interception_window_ms": scenario.attack.interception_window_ms if scenario.attack else None,
        "duty_cycle": list(scenario.attack.duty_cycle) if scenario.attack else None,
    }
    if scenario.defense is not None:
        det = scenario.defense.detector_config
        meta["detector"] = {
            "short_lived_home_threshold_ms": det.short_lived_home_threshold_ms,
            "min_occurrences": det.min_occurrences,
            "window_s": det.window_s,
            "enabled": scenario.defense.detectors_enabled,
        }
    if scenario.relay is not None:
        meta["relay_sessions"] = {
            sess.session_id: {"min_s": sess.delay.min_s, "max_s": sess.delay.max_s}
            for sess in scenario.relay.sessions
        }
    return meta


def _compute_metrics(
    merged: list[dict],
    scenario: Scenario,
    driver: ScriptDriver,
    relay_stats: dict,
    duration_ms: int,
) -> dict:
    home_pkg = driver.home_pkg
    outcomes = analysis.exit_outcomes(merged, home_pkg)
    load_times: dict[str, list[float]] = {}
    for outcome in outcomes:
        load_times.setdefault(outcome["exiting"], []).append(round(outcome["load_s"], 3))
    virtual = (
        analysis.virtual_exit_outcomes(merged, scenario.attack.package_id)
        if scenario.attack
        else []
    )
    overall_latencies = [
        r["latency_s"]
        for r in analysis.relay_deliveries(merged)
        if r.get("latency_s") is not None
    ]
    metrics: dict[str, Any] = {
        "exits": len(outcomes),
        "trapped_exits": sum(1 for o in outcomes if o["trapped"]),
        "alerts": analysis.count_kind(merged, events.ALERT),
        "relay_latency": {
            "sessions": relay_stats,
            "overall": latency_stats(overall_latencies) if overall_latencies else None,
        },
        "credentials_captured": analysis.count_kind(merged, events.CREDENTIAL_CAPTURE),
        "hijack_triples": driver.triples,
        "gap_events": analysis.count_kind(merged, events.RELAY_GAP),
        "exit_landings": outcomes,
        "home_load_times": load_times,
        "virtual_exits": {
            "total": len(virtual),
            "stayed_in_replica": sum(1 for v in virtual if v["stayed"]),
        },
        "attack_active_fraction": attack_active_fraction(merged, duration_ms),
        "perceived_trace": driver.perceived,
    }
    metrics["trace_discrepancies"] = _trace_discrepancies(merged, driver, home_pkg)
    return metrics


def _trace_discrepancies(merged: list[dict], driver: ScriptDriver, home_pkg: str) -> int:
    """System-vs-perceived comparison over the non-home activity starts."""
    from .device import ActivityRecord

    system = [
        ActivityRecord(package_id=r["package"], started_at_ms=r["t_ms"])
        for r in merged
        if r["kind"] == events.ACTIVITY_START and r.get("package") != home_pkg
    ]
    if not system and not driver.perceived:
        return 0
    perceived = PerceivedTrace(entries=driver.perceived)
    return len(compare_traces(system, perceived, slack_ms=10_000))


def evaluate_defense(scenario: Scenario, attacked: Optional[RunResult] = None) -> DefenseReport:
    """Score the scenario's policy: attacked run vs its benign twin."""
    if scenario.defense is None:
        raise InceptSimError("scenario has no defense policy to evaluate")
    attacked = attacked or simulate(scenario)
    twin = simulate(scenario.benign_twin())
    inception = scenario.attack.package_id if scenario.attack else None
    succeeded = False
    if inception is not None:
        succeeded = any(
            r["kind"] == events.ACTIVITY_START and r.get("package") == inception
            for r in attacked.log
        )
    activation = next(
        (r["t_ms"] for r in attacked.log if r["kind"] == events.SCRIPT_STARTED), None
    )
    first_alert = next((r["t_ms"] for r in attacked.log if r["kind"] == events.ALERT), None)
    latency_s = None
    if activation is not None and first_alert is not None:
        latency_s = (first_alert - activation) / 1000.0
    return DefenseReport(
        attack_succeeded=succeeded,
        detection_latency_s=latency_s,
        false_positive_alerts=analysis.count_kind(twin.log, events.ALERT),
        attack_active_fraction=attacked.metrics["attack_active_fraction"],
    )


def run(scenario_path: str, out_dir: str, overrides: Optional[list[str]] = None) -> RunReport:
    """Full deterministic run with artifacts written to ``out_dir``."""
    started = time.monotonic()
    scenario = load_scenario(scenario_path, overrides)
    result = simulate(scenario)
    metrics = dict(result.metrics)
    if scenario.defense is not None and scenario.attack is not None:
        metrics["defense"] = evaluate_defense(scenario, result).to_dict()
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "events.jsonl")
    events.write_log(log_path, result.log)
    report = RunReport(
        event_log_path=log_path,
        metrics=metrics,
        wall_time_s=round(time.monotonic() - started, 6),
        meta=result.meta,
    )
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=False)
        fh.write("\n")
    log.info("run %s complete: %d records", scenario.name, len(result.log))
    return report

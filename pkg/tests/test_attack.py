"""Attack-engine behavior: bootstrap, replica build, activation, alt mode."""

import random

import pytest

from inceptsim import events
from inceptsim.attack import (
    AccessChannel,
    AccessMode,
    ActivationScript,
    GrantPolicy,
    ReplicationStrategy,
    StrategyKind,
    StrategyRuntime,
    activation_script_step,
    alt_mode_step,
    build_inception_app,
    choose_background_guess,
    collect_config,
    fidelity_report,
    gui_replica_handoff,
    request_access,
    run_trap_loop,
)
from inceptsim.device import Caller, InstallVia
from inceptsim.errors import (
    AdbDisabled,
    EmptyCandidates,
    NotOnNetwork,
    StrategyMismatch,
    UnknownPackageInStrategyMap,
)
from inceptsim.transforms import Credential

from conftest import make_simulator


def channel(policy="always_grant", same_network=True, p=0.5):
    grant = GrantPolicy(policy) if policy != "probabilistic" else GrantPolicy("probabilistic", p)
    return AccessChannel(mode=AccessMode.WIRELESS_ADB, same_network=same_network, user_grant_policy=grant)


def install_attack(sim, strategies=None, window=150, duty=(1, 0)):
    cfg = collect_config(sim)
    strategies = strategies or {
        p: ReplicationStrategy(StrategyKind.DIRECT_CALL)
        for p in cfg.package_list
        if p != "home_env"
    }
    app = build_inception_app(cfg, strategies)
    sim.install_app(app.descriptor, InstallVia.ADB)
    script = ActivationScript(sim, app, window, duty)
    return app, script


class TestRequestAccess:
    def test_same_network_always_grant(self, sim):
        assert request_access(sim, channel(), random.Random(0)) == "granted"

    def test_developer_mode_off(self):
        sim = make_simulator(developer_mode=False)
        with pytest.raises(AdbDisabled):
            request_access(sim, channel(), random.Random(0))

    def test_off_network(self, sim):
        with pytest.raises(NotOnNetwork):
            request_access(sim, channel(same_network=False), random.Random(0))

    def test_probabilistic_grant_rate(self, sim):
        rng = random.Random(1234)
        grants = sum(
            request_access(sim, channel("probabilistic", p=0.5), rng) == "granted"
            for _ in range(10_000)
        )
        assert abs(grants / 10_000 - 0.5) <= 0.02


class TestCollectConfig:
    def test_read_back(self, sim):
        cfg = collect_config(sim)
        assert cfg.background_apk_id == "winter_lodge"
        assert set(cfg.package_list) == set(sim.state.installed)

    def test_recent_apps_order(self, sim):
        sim.launch_app("browser", Caller.USER)
        sim.launch_app("vrchat", Caller.USER)
        assert collect_config(sim).recent_apps[:2] == ["vrchat", "browser"]

    def test_emits_exactly_three_adb_commands(self, sim):
        before = len([r for r in sim.log if r["kind"] == events.ADB])
        collect_config(sim)
        after = [r for r in sim.log if r["kind"] == events.ADB]
        assert len(after) - before == 3
        assert {r["verb"] for r in after[before:]} == {"logcat", "list_packages", "dumpsys"}

    def test_pure_read(self, sim):
        stack_before = list(sim.state.activity_stack)
        collect_config(sim)
        assert sim.state.activity_stack == stack_before


class TestBuildInceptionApp:
    def test_full_fidelity_report_empty(self, sim):
        cfg = collect_config(sim)
        app = build_inception_app(cfg, {})
        assert not fidelity_report(app, sim).discrepancies
        assert app.descriptor.size_bytes == 700_000_000
        assert app.descriptor.has_splash_screen is False

    def test_each_override_adds_one_discrepancy(self, sim):
        cfg = collect_config(sim)
        overrides = [
            {"shows_recent_apps": False},
            {"splash_removed": False},
            {"cursor_scale": 0.8},
            {"shows_exit_confirm_popup": False},
            {"background_apk_id": "walnut_grove"},
        ]
        for override in overrides:
            app = build_inception_app(cfg, {}, override)
            report = fidelity_report(app, sim)
            assert len(report.discrepancies) == 1, override
            assert report.discrepancies[0]["knob"] == next(iter(override))

    def test_unknown_strategy_package(self, sim):
        cfg = collect_config(sim)
        with pytest.raises(UnknownPackageInStrategyMap):
            build_inception_app(cfg, {"ghost": ReplicationStrategy(StrategyKind.DIRECT_CALL)})

    def test_splash_kept_when_not_removed(self, sim):
        cfg = collect_config(sim)
        app = build_inception_app(cfg, {}, {"splash_removed": False})
        sim.install_app(app.descriptor, InstallVia.ADB)
        sim.launch_app(app.descriptor.package_id, Caller.USER)
        # a launch of the low-fidelity replica shows a splash that the real
        # home never shows
        assert [r for r in sim.log if r["kind"] == events.SPLASH and r["package"] == app.descriptor.package_id]


def key_event(key, edge, t=0):
    return {"t_ms": t, "kind": events.KEY, "key": key, "edge": edge}


class TestActivationScriptStep:
    def make_app(self, sim):
        return build_inception_app(collect_config(sim), {})

    def test_up_edge_emits_force_stop_then_start(self, sim):
        app = self.make_app(sim)
        actions = activation_script_step(key_event("home_button", "up"), "vrchat", app)
        assert [a.verb for a in actions] == ["force_stop", "start_activity"]
        assert actions[0].target == "vrchat"
        assert actions[1].target == app.descriptor.package_id

    def test_down_edge_ignored(self, sim):
        app = self.make_app(sim)
        assert activation_script_step(key_event("home_button", "down"), "vrchat", app) == []

    def test_random_log_brute_force_scan(self, sim):
        # Independent oracle: scan the log for home-button up edges and
        # compare positions against where the step function fires.
        app = self.make_app(sim)
        rng = random.Random(77)
        log = []
        for t in range(1_000):
            kind = rng.choice(["key", "activity_start", "adb", "popup"])
            if kind == "key":
                log.append(
                    key_event(
                        rng.choice(["home_button", "virtual_exit", "other"]),
                        rng.choice(["up", "down"]),
                        t,
                    )
                )
            else:
                log.append({"t_ms": t, "kind": kind})
        fired = [
            i for i, e in enumerate(log) if activation_script_step(e, "top", app)
        ]
        expected = [
            i
            for i, e in enumerate(log)
            if e["kind"] == "key" and e.get("key") == "home_button" and e.get("edge") == "up"
        ]
        assert fired == expected


class TestTrapLoop:
    def test_script_active_all_exits_trapped(self, sim):
        app, script = install_attack(sim)
        trace = run_trap_loop(sim, app, True, 50, random.Random(5))
        assert len(trace.exits) == 50
        assert all(e.landed_package == app.descriptor.package_id for e in trace.exits)

    def test_script_inactive_all_exits_home(self, sim):
        app, _ = install_attack(sim)
        trace = run_trap_loop(sim, app, False, 10, random.Random(5))
        assert all(e.landed_package == "home_env" for e in trace.exits)

    def test_restart_mid_run_breaks_trap(self, sim):
        app, _ = install_attack(sim)
        trace = run_trap_loop(sim, app, True, 6, random.Random(5), restart_after=3)
        assert [e.landed_package for e in trace.exits[:3]] == [app.descriptor.package_id] * 3
        assert all(e.landed_package == "home_env" for e in trace.exits[3:])
        assert app.descriptor.package_id in sim.state.installed

    def test_trap_invariant_no_settled_home(self, sim):
        app, _ = install_attack(sim)
        trace = run_trap_loop(sim, app, True, 20, random.Random(9))
        settled_home = [
            r
            for r in trace.records
            if r["kind"] == events.ACTIVITY_SETTLED and r["package"] == "home_env"
        ]
        assert settled_home == []

    def test_user_exit_followed_by_inception_within_window(self, sim):
        from inceptsim.analysis import interception_pairs

        window = 150
        app, _ = install_attack(sim, window=window)
        trace = run_trap_loop(sim, app, True, 15, random.Random(11))
        pairs = interception_pairs(trace.records, "home_env")
        assert len(pairs) == 15
        for pair in pairs:
            assert pair["next_pkg"] == app.descriptor.package_id
            assert pair["gap_ms"] <= window


class TestGuiReplicaHandoff:
    def strategy_app(self, sim, crash_popup=True, dormant=True):
        strategies = {
            "vrchat": ReplicationStrategy(
                StrategyKind.GUI_REPLICA,
                capture_fields=["login.user", "login.secret"],
                crash_popup_on_handoff=crash_popup,
                dormant_after_capture=dormant,
            )
        }
        app = build_inception_app(collect_config(sim), strategies)
        sim.install_app(app.descriptor, InstallVia.ADB)
        sim.launch_app(app.descriptor.package_id, Caller.USER)
        return app

    def test_first_launch_captures_and_hands_off(self, sim):
        app = self.strategy_app(sim)
        gui_replica_handoff(sim, app, "vrchat", Credential("vrchat", "alice", "pw"))
        kinds = [r["kind"] for r in sim.log]
        assert events.CREDENTIAL_CAPTURE in kinds
        crash = [r for r in sim.log if r["kind"] == events.POPUP and r["popup"] == "app_crash"]
        assert crash
        assert sim.state.foreground_package() == "vrchat"

    def test_dormant_second_launch_no_capture(self, sim):
        app = self.strategy_app(sim)
        runtime = StrategyRuntime(sim, app)
        runtime.open_app("vrchat", Credential("vrchat", "alice", "pw"))
        assert app.strategies["vrchat"].kind == StrategyKind.DIRECT_CALL
        captures_before = sum(1 for r in sim.log if r["kind"] == events.CREDENTIAL_CAPTURE)
        sim.launch_app(app.descriptor.package_id, Caller.USER)
        runtime.open_app("vrchat", Credential("vrchat", "alice", "pw"))
        captures_after = sum(1 for r in sim.log if r["kind"] == events.CREDENTIAL_CAPTURE)
        assert captures_before == captures_after == 1

    def test_no_crash_popup_logs_double_splash_risk(self, sim):
        app = self.strategy_app(sim, crash_popup=False)
        gui_replica_handoff(sim, app, "vrchat", Credential("vrchat", "alice", "pw"))
        risks = [r for r in sim.log if r["kind"] == events.FIDELITY_RISK]
        assert risks and risks[0]["reason"] == "double_splash"

    def test_strategy_mismatch(self, sim):
        app = self.strategy_app(sim)
        with pytest.raises(StrategyMismatch):
            gui_replica_handoff(sim, app, "browser", Credential("browser", "a", "b"))

    def test_raw_secret_never_in_log(self, sim):
        app = self.strategy_app(sim)
        gui_replica_handoff(sim, app, "vrchat", Credential("vrchat", "alice", "sup3rs3cret"))
        for rec in sim.log:
            assert "sup3rs3cret" not in events.dumps(rec)


class TestAltMode:
    def make_app(self, sim):
        app = build_inception_app(collect_config(sim), {}, package_id="com.fun.game")
        sim.install_app(app.descriptor, InstallVia.STORE)
        return app

    def test_virtual_exit_inside_app_shows_replica(self, sim):
        app = self.make_app(sim)
        actions = alt_mode_step(key_event("virtual_exit", "up"), "com.fun.game", app)
        assert [a.verb for a in actions] == ["show_replica_home"]

    def test_home_button_not_interceptable(self, sim):
        app = self.make_app(sim)
        assert alt_mode_step(key_event("home_button", "up"), "com.fun.game", app) == []
        sim.launch_app("com.fun.game", Caller.USER)
        sim.press_home()
        sim.run_until_idle()
        assert sim.state.foreground_package() == "home_env"

    def test_virtual_exit_in_other_app_ignored(self, sim):
        app = self.make_app(sim)
        assert alt_mode_step(key_event("virtual_exit", "up"), "vrchat", app) == []


class TestBackgroundGuess:
    def test_argmax_popularity(self):
        assert choose_background_guess([{"apk_id": "a", "popularity": 5}, {"apk_id": "b", "popularity": 9}]) == "b"

    def test_lexicographic_tie_break(self):
        assert choose_background_guess([{"apk_id": "b", "popularity": 5}, {"apk_id": "a", "popularity": 5}]) == "a"

    def test_single_candidate(self):
        assert choose_background_guess([{"apk_id": "only", "popularity": 1}]) == "only"

    def test_empty(self):
        with pytest.raises(EmptyCandidates):
            choose_background_guess([])

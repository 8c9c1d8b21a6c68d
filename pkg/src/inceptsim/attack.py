"""The attacker pipeline: bootstrap access, harvest device configuration,
build the hijack payload app, and run the activation loop that keeps every
app exit landing in the replicated home.

The activation script is modeled as a named background process on the
device. It reacts to home-button up edges only; its force-stop/start pair
lands one interception window after the legitimate home activity starts,
so the home appears in traces as a short-lived activity that never finishes
loading. A restart kills the process; app exits do not.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from . import events
from .device import (
    ActivityRecord,
    AdbVerb,
    AppDescriptor,
    AppKind,
    Caller,
    KeyEdge,
    KeyName,
    PopupKind,
    Simulator,
    parse_dumpsys_recents,
    parse_dumpsys_top,
    parse_logcat_background,
)
from .errors import (
    AdbDisabled,
    EmptyCandidates,
    InceptSimError,
    NotOnNetwork,
    StrategyMismatch,
    UnknownPackageInStrategyMap,
)
from .transforms import Credential

DEFAULT_INTERCEPTION_WINDOW_MS = 150
DEFAULT_APP_SIZE_BYTES = 700_000_000
SCRIPT_PROCESS = "activation_script"


class AccessMode(str, Enum):
    WIRELESS_ADB = "wireless_adb"
    EMBEDDED_ADB = "embedded_adb"


class GrantPolicy:
    """User response to a debug-access request."""

    ALWAYS_GRANT = "always_grant"
    ALWAYS_DENY = "always_deny"

    def __init__(self, kind: str, probability: float = 1.0):
        self.kind = kind
        self.probability = probability

    @classmethod
    def from_config(cls, cfg) -> "GrantPolicy":
        if isinstance(cfg, str):
            return cls(cfg)
        return cls("probabilistic", float(cfg["probabilistic"]))


@dataclass
class AccessChannel:
    mode: AccessMode
    same_network: bool
    user_grant_policy: GrantPolicy


@dataclass
class HeadsetConfig:
    background_apk_id: str
    package_list: list[str]
    recent_apps: list[str]


class StrategyKind(str, Enum):
    DIRECT_CALL = "direct_call"
    GUI_REPLICA = "gui_replica"
    LOCAL_API_SIM = "local_api"
    OVER_NETWORK_SIM = "over_network"


@dataclass
class ReplicationStrategy:
    kind: StrategyKind
    # gui_replica
    capture_fields: list[str] = field(default_factory=list)
    crash_popup_on_handoff: bool = True
    dormant_after_capture: bool = True
    # local_api
    transform_set_id: Optional[str] = None
    # over_network
    relay_endpoint: Optional[str] = None
    stream_audio: bool = True
    stream_video: bool = False


@dataclass
class ReplicaHome:
    background_apk_id: str
    app_buttons: list[str]
    shows_recent_apps: bool = True
    splash_removed: bool = True
    cursor_scale: float = 1.0
    shows_exit_confirm_popup: bool = True


@dataclass
class InceptionApp:
    descriptor: AppDescriptor
    replica_home: ReplicaHome
    strategies: dict[str, ReplicationStrategy]


@dataclass
class FidelityReport:
    discrepancies: list[dict]

    def __bool__(self) -> bool:
        return bool(self.discrepancies)


# --- bootstrap -------------------------------------------------------------


def request_access(sim: Simulator, channel: AccessChannel, rng: random.Random) -> str:
    """Attempt to obtain debug access; returns "granted" or "denied"."""
    if channel.mode == AccessMode.WIRELESS_ADB:
        if not channel.same_network:
            raise NotOnNetwork("wireless debug access needs the same network")
        if not sim.state.adb_enabled:
            raise AdbDisabled("developer mode is off")
    policy = channel.user_grant_policy
    if policy.kind == GrantPolicy.ALWAYS_GRANT:
        granted = True
    elif policy.kind == GrantPolicy.ALWAYS_DENY:
        granted = False
    else:
        granted = rng.random() < policy.probability
    return "granted" if granted else "denied"


def collect_config(sim: Simulator) -> HeadsetConfig:
    """Read the three configuration surfaces the replica needs.

    Pure read: exactly three debug commands are logged and nothing else
    about the device changes.
    """
    background = parse_logcat_background(sim.query(AdbVerb.LOGCAT))
    packages = sim.query(AdbVerb.LIST_PACKAGES).splitlines()
    recents = parse_dumpsys_recents(sim.query(AdbVerb.DUMPSYS))
    return HeadsetConfig(
        background_apk_id=background or "",
        package_list=[p for p in packages if p],
        recent_apps=recents,
    )


def build_inception_app(
    config: HeadsetConfig,
    strategies: dict[str, ReplicationStrategy],
    fidelity_overrides: Optional[dict] = None,
    package_id: str = "com.inception.app",
    size_bytes: int = DEFAULT_APP_SIZE_BYTES,
) -> InceptionApp:
    for pkg in strategies:
        if pkg not in config.package_list:
            raise UnknownPackageInStrategyMap(pkg)
    overrides = fidelity_overrides or {}
    home = ReplicaHome(
        background_apk_id=overrides.get("background_apk_id", config.background_apk_id),
        app_buttons=list(config.package_list),
        shows_recent_apps=overrides.get("shows_recent_apps", True),
        splash_removed=overrides.get("splash_removed", True),
        cursor_scale=overrides.get("cursor_scale", 1.0),
        shows_exit_confirm_popup=overrides.get("shows_exit_confirm_popup", True),
    )
    descriptor = AppDescriptor(
        package_id=package_id,
        display_name="System Update Helper",
        kind=AppKind.APP_3D,
        certificate=None,
        has_splash_screen=not home.splash_removed,
        size_bytes=size_bytes,
    )
    return InceptionApp(descriptor=descriptor, replica_home=home, strategies=dict(strategies))


def fidelity_report(app: InceptionApp, sim: Simulator) -> FidelityReport:
    """Compare the replica home against device-derived ground truth."""
    truth = {
        "background_apk_id": sim.state.home_background_id,
        "shows_recent_apps": True,
        "splash_removed": True,
        "cursor_scale": 1.0,
        "shows_exit_confirm_popup": True,
    }
    replica = {
        "background_apk_id": app.replica_home.background_apk_id,
        "shows_recent_apps": app.replica_home.shows_recent_apps,
        "splash_removed": app.replica_home.splash_removed,
        "cursor_scale": app.replica_home.cursor_scale,
        "shows_exit_confirm_popup": app.replica_home.shows_exit_confirm_popup,
    }
    discrepancies = [
        {"knob": knob, "legitimate_value": truth[knob], "replica_value": replica[knob]}
        for knob in truth
        if truth[knob] != replica[knob]
    ]
    return FidelityReport(discrepancies)


# --- activation ------------------------------------------------------------


@dataclass(frozen=True)
class Action:
    """One step emitted by the activation script."""

    verb: str  # "force_stop" | "start_activity"
    target: str


def activation_script_step(event: dict, top_activity: Optional[str], app: InceptionApp) -> list[Action]:
    """Pure matching rule of the activation loop.

    Only a home-button *up* edge triggers; everything else passes through.
    The force-stop targets whatever the debug bridge reports as top when the
    command lands, which during an exit chain is the half-loaded home.
    """
    if event.get("kind") != events.KEY:
        return []
    if event.get("key") != KeyName.HOME_BUTTON.value or event.get("edge") != KeyEdge.UP.value:
        return []
    return [
        Action("force_stop", top_activity or ""),
        Action("start_activity", app.descriptor.package_id),
    ]


class ActivationScript:
    """The background trap loop, wired into a Simulator.

    ``duty_cycle`` = (intercept, sleep): intercept that many consecutive
    exits, then let that many through, repeating. (1, 0) intercepts all.
    """

    def __init__(
        self,
        sim: Simulator,
        app: InceptionApp,
        interception_window_ms: int = DEFAULT_INTERCEPTION_WINDOW_MS,
        duty_cycle: tuple[int, int] = (1, 0),
    ):
        self.sim = sim
        self.app = app
        self.window_ms = interception_window_ms
        self.duty_cycle = duty_cycle
        self._cycle_pos = 0
        self._interceptor = self._on_exit_commit

    def start(self) -> None:
        self.sim.start_process(SCRIPT_PROCESS, tag="attack")
        self.sim.add_exit_interceptor(self._interceptor)

    def stop(self, reason: str = "stopped") -> None:
        self.sim.remove_exit_interceptor(self._interceptor)
        self.sim.stop_process(SCRIPT_PROCESS, reason)

    def alive(self) -> bool:
        return self.sim.process_alive(SCRIPT_PROCESS)

    def rearm_after_restart(self) -> None:
        # restart() cleared the process table and the interceptor survives
        # only as our own registration; re-register both.
        if self._interceptor not in self.sim._exit_interceptors:
            self.sim.add_exit_interceptor(self._interceptor)
        if not self.sim.process_alive(SCRIPT_PROCESS):
            self.sim.start_process(SCRIPT_PROCESS, tag="attack")

    def _duty_active(self) -> bool:
        on, off = self.duty_cycle
        if off <= 0:
            return True
        pos = self._cycle_pos % (on + off)
        self._cycle_pos += 1
        return pos < on

    def _on_exit_commit(self, press_t: int, exiting: ActivityRecord, home: ActivityRecord, load_s: float) -> None:
        if not self.alive():
            return
        if not self._duty_active():
            return
        land_at = home.started_at_ms + self.window_ms
        first = self.app.descriptor.package_id not in self.sim.warm_assets
        extra = self.sim.load_model.inception_first_extra_s if first else 0.0
        settle_at = press_t + max(
            int(round((load_s + extra) * 1000)), self.window_ms + 1
        )

        def land() -> None:
            if not self.alive():
                return
            if home.stopped_at_ms is not None:
                return  # chain superseded before we landed
            dump = self.sim.query(AdbVerb.DUMPSYS)
            top = parse_dumpsys_top(dump)
            if top is None:
                return
            self.sim.force_stop(top, by="script")
            self.sim.emit(events.ADB, verb=AdbVerb.START_ACTIVITY.value, args=self.app.descriptor.package_id)
            try:
                rec = self.sim.launch_app(
                    self.app.descriptor.package_id,
                    Caller.SCRIPT,
                    caller_pkg=None,
                    settle_in_ms=max(settle_at - self.sim.now(), 1),
                )
            except Exception:
                # A prevention gate refused the start (already logged); the
                # system recovers the half-loaded home so the user is not
                # left in the void.
                self.sim.launch_app(
                    self.sim.state.home_package(),
                    Caller.SYSTEM,
                    settle_in_ms=max(int(round(load_s * 1000)), 1),
                )
                return
            self.sim.emit(events.REPLICA_HOME, package=rec.package_id, shown=True)

        self.sim.schedule(land_at, land)


# --- per-app strategy dispatch ----------------------------------------------


class StrategyRuntime:
    """Dispatches app-button clicks in the replica home per strategy."""

    def __init__(self, sim: Simulator, app: InceptionApp, credential_salt: str = ""):
        self.sim = sim
        self.app = app
        self.salt = credential_salt
        self.captured: dict[str, Credential] = {}

    def open_app(self, package_id: str, credential: Optional[Credential] = None) -> None:
        strategy = self.app.strategies.get(package_id)
        if strategy is None or strategy.kind == StrategyKind.DIRECT_CALL:
            try:
                # Uni-processing: calling the real app stops the replica itself.
                self.sim.launch_app(package_id, Caller.APP, caller_pkg=self.app.descriptor.package_id)
            except InceptSimError:
                pass  # call refused by policy; user stays in the replica
            return
        if strategy.kind == StrategyKind.GUI_REPLICA:
            cred = credential or Credential(package_id, f"user@{package_id}", "secret")
            gui_replica_handoff(self.sim, self.app, package_id, cred, self.salt)
            self.captured[package_id] = cred
            return
        # Full-hijack strategies keep the replica foreground: the simulated
        # app runs inside the hijack app, so no activity transition happens.
        # Both need the account first, harvested from the replicated login.
        if package_id not in self.captured:
            cred = credential or Credential(package_id, f"user@{package_id}", "secret")
            self.sim.emit(events.CREDENTIAL_CAPTURE, **cred.redacted(self.salt))
            self.captured[package_id] = cred
        self.sim.emit(
            events.REPLICA_HOME,
            package=self.app.descriptor.package_id,
            simulated_app=package_id,
            strategy=strategy.kind.value,
        )


def gui_replica_handoff(
    sim: Simulator,
    app: InceptionApp,
    target_pkg: str,
    captured: Credential,
    salt: str = "",
) -> list[Action]:
    """Capture a credential on the replicated login page, then hand off."""
    strategy = app.strategies.get(target_pkg)
    if strategy is None or strategy.kind != StrategyKind.GUI_REPLICA:
        raise StrategyMismatch(target_pkg)
    sim.emit(events.CREDENTIAL_CAPTURE, **captured.redacted(salt))
    actions = []
    if strategy.crash_popup_on_handoff:
        sim.emit(events.POPUP, popup=PopupKind.APP_CRASH.value)
    else:
        sim.emit(events.FIDELITY_RISK, reason="double_splash", package=target_pkg)
    sim.launch_app(target_pkg, Caller.APP, caller_pkg=app.descriptor.package_id)
    actions.append(Action("start_activity", target_pkg))
    if strategy.dormant_after_capture:
        app.strategies[target_pkg] = ReplicationStrategy(kind=StrategyKind.DIRECT_CALL)
    return actions


# --- store-published variant -------------------------------------------------


def alt_mode_step(event: dict, foreground_pkg: Optional[str], app: InceptionApp) -> list[Action]:
    """Store-published variant: no script, only the in-app exit button traps.

    A virtual-exit press inside the hijack app swaps to the replica home; a
    real home press always escapes because nothing can intercept it.
    """
    if event.get("kind") != events.KEY or event.get("edge") != KeyEdge.UP.value:
        return []
    if foreground_pkg != app.descriptor.package_id:
        return []
    if event.get("key") == KeyName.VIRTUAL_EXIT.value:
        return [Action("show_replica_home", app.descriptor.package_id)]
    return []


def choose_background_guess(candidates: list[dict], seed: int = 0) -> str:
    """Pick a background APK to embed when the real one cannot be read.

    Deterministic: highest popularity wins, ties break lexicographically.
    """
    if not candidates:
        raise EmptyCandidates("no background candidates")
    best = sorted(candidates, key=lambda c: (-int(c["popularity"]), c["apk_id"]))[0]
    return best["apk_id"]


# --- trap loop ----------------------------------------------------------------


@dataclass
class ExitOutcome:
    at_ms: int
    from_package: str
    landed_package: str
    trapped: bool


@dataclass
class SimulationTrace:
    records: list[dict]
    exits: list[ExitOutcome]

    @property
    def trapped_count(self) -> int:
        return sum(1 for e in self.exits if e.trapped)


def run_trap_loop(
    sim: Simulator,
    app: InceptionApp,
    script_active: bool,
    horizon_exits: int,
    rng: random.Random,
    restart_after: Optional[int] = None,
    interception_window_ms: int = DEFAULT_INTERCEPTION_WINDOW_MS,
    duty_cycle: tuple[int, int] = (1, 0),
) -> SimulationTrace:
    """Drive random launch/exit behavior and record where each exit lands.

    ``restart_after``: inject a soft restart after that many exits (the
    script is killed and not re-armed, so later exits land in the real home).
    """
    script = None
    if script_active:
        script = ActivationScript(sim, app, interception_window_ms, duty_cycle)
        script.start()
    runtime = StrategyRuntime(sim, app)
    inception_pkg = app.descriptor.package_id
    choices = [
        p
        for p, a in sim.state.installed.items()
        if a.kind != AppKind.HOME and p != inception_pkg
    ]
    outcomes: list[ExitOutcome] = []
    for i in range(horizon_exits):
        if restart_after is not None and i == restart_after:
            sim.restart(hard=False)
        target = rng.choice(choices)
        if sim.state.foreground_package() == inception_pkg:
            runtime.open_app(target)
        else:
            sim.launch_app(target, Caller.USER)
        sim.advance_to(sim.now() + rng.randint(2_000, 15_000))
        press_t = sim.press_home()
        sim.run_until_idle()
        landed = sim.state.foreground_package() or ""
        outcomes.append(
            ExitOutcome(
                at_ms=press_t,
                from_package=target,
                landed_package=landed,
                trapped=landed == inception_pkg,
            )
        )
    return SimulationTrace(records=list(sim.log), exits=outcomes)

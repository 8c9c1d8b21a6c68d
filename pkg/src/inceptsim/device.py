"""Deterministic discrete-event model of an abstract VR headset OS.

The model covers exactly what the attack and defenses need to observe: an
app registry, a single-foreground activity stack, a home environment that
takes seconds to load after an app exit, debug-bridge queries, and restarts.
Time is integer simulated milliseconds; all randomness flows through one
seeded generator, so identical (scenario, seed) pairs replay identically.

Exit-chain timing. Pressing the home button at ``T`` produces:

  T        key down / key up, exit-confirm popup
  T+300    the exiting app stops (user confirms), the home activity starts
  T+L      the home finishes loading ("settles"); L is drawn per exiting app

An interception (see the attack engine) force-stops the home activity a
configurable window after it starts, before its load ever completes, which
is what makes the legitimate home "short-lived" in the traces.
"""

from __future__ import annotations

import heapq
import itertools
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from . import events
from .errors import (
    AdbDisabled,
    DuplicatePackage,
    NoForegroundApp,
    NotInstalled,
    SizeLimitExceeded,
    UnknownApp,
)

APP_SIZE_LIMIT_BYTES = 4 * 2**30
POPUP_CONFIRM_MS = 300  # exit-confirm popup precedes the app's stop by this much
RECENT_APPS_MAX = 8
DEFAULT_BOOT_S = 30.0


class AppKind(str, Enum):
    APP_2D = "app_2d"
    APP_3D = "app_3d"
    HOME = "home_environment"


class KeyName(str, Enum):
    HOME_BUTTON = "home_button"
    VIRTUAL_EXIT = "virtual_exit"
    OTHER = "other"


class KeyEdge(str, Enum):
    DOWN = "down"
    UP = "up"


class StopCause(str, Enum):
    USER_EXIT = "user_exit"
    FORCE_STOP = "force_stop"
    CRASH = "crash"
    RESTART = "restart"


class AdbVerb(str, Enum):
    LIST_PACKAGES = "list_packages"
    LOGCAT = "logcat"
    DUMPSYS = "dumpsys"
    GET_EVENT = "get_event"
    INSTALL = "install"
    FORCE_STOP = "force_stop"
    START_ACTIVITY = "start_activity"


class Caller(str, Enum):
    USER = "user"
    APP = "app"
    SCRIPT = "script"
    SYSTEM = "system"


class PopupKind(str, Enum):
    EXIT_CONFIRM = "exit_confirm"
    APP_CRASH = "app_crash"


class InstallVia(str, Enum):
    STORE = "store"
    ADB = "adb"


@dataclass(frozen=True)
class AppDescriptor:
    package_id: str
    display_name: str
    kind: AppKind
    certificate: Optional[str] = None
    has_splash_screen: bool = True
    size_bytes: int = 0


@dataclass
class ActivityRecord:
    package_id: str
    started_at_ms: int
    foreground: bool = True
    stopped_at_ms: Optional[int] = None
    settled_at_ms: Optional[int] = None
    stop_cause: Optional[StopCause] = None
    caller: str = Caller.USER.value


@dataclass
class LoadTimeModel:
    """Home load durations keyed by the app being exited (Normal, seconds)."""

    per_app: dict[str, tuple[float, float]]
    inception_first_extra_s: float = 1.5
    distribution: str = "normal"

    def __post_init__(self) -> None:
        for pkg, (_, std) in self.per_app.items():
            if std < 0:
                raise ValueError(f"negative std for {pkg}")
        if self.inception_first_extra_s < 0:
            raise ValueError("inception_first_extra_s must be >= 0")


def sample_home_load_time(
    model: LoadTimeModel,
    exiting_app: str,
    under_inception: bool,
    first_activation: bool,
    rng: random.Random,
) -> float:
    """Draw one home-load duration in seconds for an exit of ``exiting_app``.

    The first activation of the hijacked home pays a fixed extra on top of
    the no-attack distribution; later activations match it exactly.
    """
    if exiting_app not in model.per_app:
        raise UnknownApp(exiting_app)
    mean, std = model.per_app[exiting_app]
    value = rng.gauss(mean, std) if std > 0 else mean
    if under_inception and first_activation:
        value += model.inception_first_extra_s
    return max(0.0, value)


@dataclass
class DeviceSettings:
    wifi: bool = True
    bluetooth: bool = False
    audio_volume: int = 70


@dataclass
class DeviceState:
    installed: dict[str, AppDescriptor] = field(default_factory=dict)
    developer_mode: bool = False
    activity_stack: list[ActivityRecord] = field(default_factory=list)
    recent_apps: list[str] = field(default_factory=list)
    home_background_id: str = "default_void"
    settings: DeviceSettings = field(default_factory=DeviceSettings)
    clock_ms: int = 0
    rng_seed: int = 0

    @property
    def adb_enabled(self) -> bool:
        # Developer mode automatically activates the debug bridge; disabling
        # one disables the other.
        return self.developer_mode

    def home_package(self) -> str:
        homes = [a.package_id for a in self.installed.values() if a.kind == AppKind.HOME]
        if len(homes) != 1:
            raise ValueError(f"expected exactly one home environment, found {homes}")
        return homes[0]

    def foreground(self) -> Optional[ActivityRecord]:
        for rec in self.activity_stack:
            if rec.foreground:
                return rec
        return None

    def foreground_package(self) -> Optional[str]:
        rec = self.foreground()
        return rec.package_id if rec else None


# Validation hook type: (caller_kind, caller_pkg, descriptor) -> None or raise.
LaunchGate = Callable[[str, Optional[str], AppDescriptor], None]


class Simulator:
    """Owns a DeviceState plus the pending-entry queue and the event log.

    Entries in the queue are closures that fire at a simulated time; they
    check their own preconditions so a superseded chain step degrades to a
    no-op instead of corrupting the stack.
    """

    def __init__(
        self,
        state: DeviceState,
        load_model: LoadTimeModel,
        seed: "int | str" = 0,
        boot_duration_s: float = DEFAULT_BOOT_S,
        factory_packages: Optional[set[str]] = None,
    ):
        self.state = state
        self.load_model = load_model
        self.rng = random.Random(seed)
        self.boot_ms = int(round(boot_duration_s * 1000))
        self.factory_packages = factory_packages or {state.home_package(), "browser"}
        self.log: list[dict] = []
        self.launch_gates: list[LaunchGate] = []
        # Packages whose scenes/assets are warm in memory; cleared on restart.
        self.warm_assets: set[str] = set()
        # Named background processes -> tag; the attack script lives here.
        self.processes: dict[str, str] = {}
        self._queue: list[tuple[int, int, Callable[[], None]]] = []
        self._counter = itertools.count()
        # Called when an exit chain commits, with
        # (press_t, exiting_record, home_record, drawn_load_s).
        self._exit_interceptors: list[Callable] = []

    # --- clock / queue ----------------------------------------------------

    def now(self) -> int:
        return self.state.clock_ms

    def schedule(self, at_ms: int, fn: Callable[[], None]) -> None:
        heapq.heappush(self._queue, (max(int(at_ms), self.now()), next(self._counter), fn))

    def run_until_idle(self) -> None:
        while self._queue:
            t, _, fn = heapq.heappop(self._queue)
            self.state.clock_ms = max(self.state.clock_ms, t)
            fn()

    def advance_to(self, t_ms: int) -> None:
        while self._queue and self._queue[0][0] <= t_ms:
            t, _, fn = heapq.heappop(self._queue)
            self.state.clock_ms = max(self.state.clock_ms, t)
            fn()
        self.state.clock_ms = max(self.state.clock_ms, int(t_ms))

    def emit(self, kind: str, **payload) -> dict:
        rec = events.record(self.now(), kind, **payload)
        self.log.append(rec)
        return rec

    # --- stack primitives ---------------------------------------------------

    def _start_activity(self, package_id: str, caller: str) -> ActivityRecord:
        app = self.state.installed[package_id]
        rec = ActivityRecord(package_id=package_id, started_at_ms=self.now(), caller=caller)
        current = self.state.foreground()
        if current is not None:
            raise AssertionError("starting an activity over a live foreground")
        self.state.activity_stack.append(rec)
        if app.kind != AppKind.HOME:
            recents = [package_id] + [p for p in self.state.recent_apps if p != package_id]
            self.state.recent_apps = recents[:RECENT_APPS_MAX]
        self.emit(events.ACTIVITY_START, package=package_id, caller=caller)
        if app.has_splash_screen:
            self.emit(events.SPLASH, package=package_id)
        return rec

    def _stop_activity(self, rec: ActivityRecord, cause: StopCause) -> None:
        if rec.stopped_at_ms is not None:
            return
        rec.stopped_at_ms = self.now()
        rec.stop_cause = cause
        rec.foreground = False
        self.emit(events.ACTIVITY_STOP, package=rec.package_id, cause=cause.value)

    def _settle(self, rec: ActivityRecord) -> None:
        if rec.stopped_at_ms is not None or rec.settled_at_ms is not None:
            return
        rec.settled_at_ms = self.now()
        self.warm_assets.add(rec.package_id)
        self.emit(events.ACTIVITY_SETTLED, package=rec.package_id)

    # --- operations ---------------------------------------------------------

    def install_app(self, app: AppDescriptor, via: InstallVia) -> None:
        if app.package_id in self.state.installed:
            raise DuplicatePackage(app.package_id)
        if via == InstallVia.ADB and not self.state.adb_enabled:
            raise AdbDisabled("developer mode is off")
        if app.size_bytes > APP_SIZE_LIMIT_BYTES:
            raise SizeLimitExceeded(f"{app.size_bytes} > {APP_SIZE_LIMIT_BYTES}")
        self.state.installed[app.package_id] = app
        if via == InstallVia.ADB:
            self.emit(events.ADB, verb=AdbVerb.INSTALL.value, args=app.package_id)
        self.emit(events.INSTALL, package=app.package_id, via=via.value, size_bytes=app.size_bytes)

    def press_home(self) -> int:
        """User presses the controller home button. Returns the press time."""
        fg = self.state.foreground()
        if fg is None:
            raise NoForegroundApp("nothing is foreground")
        if self.state.installed[fg.package_id].kind == AppKind.HOME:
            raise NoForegroundApp("home cannot exit to itself")
        t = self.now()
        self.emit(events.KEY, key=KeyName.HOME_BUTTON.value, edge=KeyEdge.DOWN.value)
        up = self.emit(events.KEY, key=KeyName.HOME_BUTTON.value, edge=KeyEdge.UP.value)
        self.emit(events.POPUP, popup=PopupKind.EXIT_CONFIRM.value)
        load_s = sample_home_load_time(self.load_model, fg.package_id, False, False, self.rng)
        load_ms = max(int(round(load_s * 1000)), POPUP_CONFIRM_MS + 1)
        exiting = fg

        def commit() -> None:
            if exiting.stopped_at_ms is not None or not exiting.foreground:
                return
            self._stop_activity(exiting, StopCause.USER_EXIT)
            home = self._start_activity(self.state.home_package(), Caller.SYSTEM.value)
            self.schedule(t + load_ms, lambda: self._settle(home))
            for fn in list(self._exit_interceptors):
                fn(t, exiting, home, load_s)

        self.schedule(t + POPUP_CONFIRM_MS, commit)
        return up["t_ms"]

    def add_exit_interceptor(self, fn) -> None:
        self._exit_interceptors.append(fn)

    def remove_exit_interceptor(self, fn) -> None:
        if fn in self._exit_interceptors:
            self._exit_interceptors.remove(fn)

    def launch_app(
        self,
        package_id: str,
        caller: Caller,
        caller_pkg: Optional[str] = None,
        settle_in_ms: int = 0,
    ) -> ActivityRecord:
        """Bring ``package_id`` to the foreground, stopping the previous app.

        Launch gates (certificate enforcement, app-call validation) may veto;
        vetoes are logged and raised, and never leave an empty foreground.
        """
        if package_id not in self.state.installed:
            raise NotInstalled(package_id)
        app = self.state.installed[package_id]
        for gate in self.launch_gates:
            try:
                gate(caller.value, caller_pkg, app)
            except Exception as exc:
                self.emit(
                    events.APP_CALL_DENIED,
                    caller=caller.value,
                    caller_pkg=caller_pkg,
                    callee=package_id,
                    reason=type(exc).__name__,
                )
                raise
        fg = self.state.foreground()
        if fg is not None:
            self._stop_activity(fg, StopCause.USER_EXIT)
        rec = self._start_activity(package_id, caller.value)
        if settle_in_ms <= 0:
            self._settle(rec)
        else:
            self.schedule(self.now() + settle_in_ms, lambda: self._settle(rec))
        return rec

    def force_stop(self, package_id: str, by: str = "script") -> Optional[ActivityRecord]:
        self.emit(events.ADB, verb=AdbVerb.FORCE_STOP.value, args=package_id)
        fg = self.state.foreground()
        if fg is not None and fg.package_id == package_id:
            self._stop_activity(fg, StopCause.FORCE_STOP)
            return fg
        return None

    def restart(self, hard: bool) -> None:
        self.emit(events.RESTART, hard=hard)
        fg = self.state.foreground()
        if fg is not None:
            self._stop_activity(fg, StopCause.RESTART)
        self.state.activity_stack.clear()
        self._queue.clear()
        for name in list(self.processes):
            self.emit(events.SCRIPT_STOPPED, process=name, reason="restart")
        self.processes.clear()
        self.warm_assets.clear()
        if hard:
            self.state.installed = {
                pkg: app
                for pkg, app in self.state.installed.items()
                if pkg in self.factory_packages
            }
            self.state.recent_apps.clear()
        self.state.clock_ms += self.boot_ms

    def query(self, verb: AdbVerb) -> str:
        if not self.state.adb_enabled:
            raise AdbDisabled("developer mode is off")
        self.emit(events.ADB, verb=verb.value, args="")
        if verb == AdbVerb.LIST_PACKAGES:
            return "\n".join(self.state.installed)
        if verb == AdbVerb.LOGCAT:
            lines = [
                "ServiceManager: boot complete",
                f"HomeEnvironment: background_apk={self.state.home_background_id}",
                f"WifiService: enabled={self.state.settings.wifi}",
            ]
            return "\n".join(lines)
        if verb == AdbVerb.DUMPSYS:
            top = self.state.foreground_package() or "-"
            recents = ",".join(self.state.recent_apps)
            return f"top-activity: {top}\nrecent-apps: {recents}"
        raise ValueError(f"query does not support verb {verb}")

    # --- background processes ----------------------------------------------

    def start_process(self, name: str, tag: str) -> None:
        self.processes[name] = tag
        self.emit(events.SCRIPT_STARTED, process=name, tag=tag)

    def stop_process(self, name: str, reason: str) -> None:
        if name in self.processes:
            del self.processes[name]
            self.emit(events.SCRIPT_STOPPED, process=name, reason=reason)

    def process_alive(self, name: str) -> bool:
        return name in self.processes

    # --- invariants ----------------------------------------------------------

    def check_single_foreground(self) -> None:
        fgs = [r for r in self.state.activity_stack if r.foreground]
        if len(fgs) > 1:
            raise AssertionError(f"multiple foreground activities: {fgs}")


def parse_dumpsys_top(dump: str) -> Optional[str]:
    for line in dump.splitlines():
        if line.startswith("top-activity:"):
            value = line.split(":", 1)[1].strip()
            return None if value == "-" else value
    return None


def parse_dumpsys_recents(dump: str) -> list[str]:
    for line in dump.splitlines():
        if line.startswith("recent-apps:"):
            value = line.split(":", 1)[1].strip()
            return [p for p in value.split(",") if p]
    return []


def parse_logcat_background(dump: str) -> Optional[str]:
    for line in dump.splitlines():
        if "background_apk=" in line:
            return line.split("background_apk=", 1)[1].strip()
    return None

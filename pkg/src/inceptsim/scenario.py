"""Scenario files: the single JSON document that declares a whole run.

A scenario fixes the device build, the optional attack, named transform
sets, optional relay traffic, the defense policy, and the timed user
script. The seed is mandatory; together with the file it fully determines
the event log.
"""

from __future__ import annotations

import copy
import importlib.resources
import json
from dataclasses import dataclass, field
from typing import Optional

from .attack import AccessChannel, AccessMode, GrantPolicy, ReplicationStrategy, StrategyKind
from .defense import DefensePolicy, DetectorConfig
from .device import AppDescriptor, AppKind, DeviceSettings, LoadTimeModel
from .errors import ScenarioParseError, ScenarioValidationError
from .relay import AudioClip, AudioClipLibrary, DelayModel
from .transforms import TransformRule, rules_from_config

DEFAULT_LOAD = (8.0, 0.7)


@dataclass
class DeviceConfig:
    apps: list[AppDescriptor]
    home_background_id: str
    developer_mode: bool
    load_model: LoadTimeModel
    settings: DeviceSettings
    boot_duration_s: float = 30.0
    factory_packages: Optional[list[str]] = None

    def home_package(self) -> str:
        homes = [a.package_id for a in self.apps if a.kind == AppKind.HOME]
        if len(homes) != 1:
            raise ScenarioValidationError("device.apps must contain exactly one home_environment")
        return homes[0]


@dataclass
class AttackConfig:
    mode: str  # "script" | "alt_store"
    access: AccessChannel
    package_id: str
    strategies: dict[str, ReplicationStrategy]
    fidelity: dict
    interception_window_ms: int = 150
    duty_cycle: tuple[int, int] = (1, 0)
    reactivation_delay_s: Optional[float] = None
    background_candidates: list[dict] = field(default_factory=list)
    credentials: dict[str, dict] = field(default_factory=dict)


@dataclass
class RelaySessionConfig:
    session_id: str
    delay: DelayModel
    start_at_s: float = 0.0
    traffic: list[dict] = field(default_factory=list)
    mode: dict = field(default_factory=dict)


@dataclass
class RelayConfig:
    delay: DelayModel
    library: AudioClipLibrary
    sessions: list[RelaySessionConfig]


@dataclass
class Scenario:
    name: str
    seed: int
    duration_s: float
    device: DeviceConfig
    attack: Optional[AttackConfig]
    transforms: dict[str, list[TransformRule]]
    relay: Optional[RelayConfig]
    defense: Optional[DefensePolicy]
    script: list[dict]
    app_content: dict[str, dict] = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def benign_twin(self) -> "Scenario":
        """Same scenario, same seed, attack stripped."""
        twin = copy.deepcopy(self)
        twin.attack = None
        twin.name = f"{self.name}+benign_twin"
        return twin


def load_scenario(path: str, overrides: Optional[list[str]] = None) -> Scenario:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ScenarioParseError(f"cannot read scenario: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    for override in overrides or []:
        apply_override(doc, override)
    return parse_scenario(doc)


def apply_override(doc: dict, override: str) -> None:
    """Apply one ``dotted.path=value`` override; values parse as JSON first."""
    if "=" not in override:
        raise ScenarioValidationError(f"override {override!r} is not key=value")
    key, raw_value = override.split("=", 1)
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    parts = key.split(".")
    node = doc
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value


def parse_scenario(doc: dict) -> Scenario:
    for required in ("name", "seed", "duration_s", "device"):
        if required not in doc:
            raise ScenarioValidationError(f"missing required field {required!r}")
    device = _parse_device(doc["device"])
    transforms = {
        set_id: rules_from_config(set_id, entries)
        for set_id, entries in doc.get("transforms", {}).items()
    }
    attack = _parse_attack(doc.get("attack"), device, transforms)
    if attack is not None and attack.package_id not in device.load_model.per_app:
        # exiting the replica home itself draws from the default distribution
        default = doc.get("device", {}).get("load_times", {}).get("default", {})
        device.load_model.per_app[attack.package_id] = (
            float(default.get("mean_s", DEFAULT_LOAD[0])),
            float(default.get("std_s", DEFAULT_LOAD[1])),
        )
    relay = _parse_relay(doc.get("relay"), transforms)
    defense = _parse_defense(doc.get("defense"))
    scenario = Scenario(
        name=doc["name"],
        seed=int(doc["seed"]),
        duration_s=float(doc["duration_s"]),
        device=device,
        attack=attack,
        transforms=transforms,
        relay=relay,
        defense=defense,
        script=list(doc.get("script", [])),
        app_content=doc.get("app_content", {}),
        raw=doc,
    )
    _validate(scenario)
    return scenario


def _parse_device(cfg: dict) -> DeviceConfig:
    apps = []
    for entry in cfg.get("apps", []):
        apps.append(
            AppDescriptor(
                package_id=entry["package_id"],
                display_name=entry.get("display_name", entry["package_id"]),
                kind=AppKind(entry.get("kind", "app_3d")),
                certificate=entry.get("certificate", "store"),
                has_splash_screen=entry.get("has_splash_screen", entry.get("kind") != "home_environment"),
                size_bytes=int(entry.get("size_bytes", 0)),
            )
        )
    load_cfg = cfg.get("load_times", {})
    default_mean, default_std = load_cfg.get("default", {}).get("mean_s", DEFAULT_LOAD[0]), load_cfg.get(
        "default", {}
    ).get("std_s", DEFAULT_LOAD[1])
    per_app = {}
    for app in apps:
        per_app[app.package_id] = (default_mean, default_std)
    for pkg, entry in load_cfg.get("per_app", {}).items():
        per_app[pkg] = (float(entry["mean_s"]), float(entry["std_s"]))
    model = LoadTimeModel(
        per_app=per_app,
        inception_first_extra_s=float(load_cfg.get("inception_first_extra_s", 1.5)),
    )
    settings_cfg = cfg.get("settings", {})
    settings = DeviceSettings(
        wifi=settings_cfg.get("wifi", True),
        bluetooth=settings_cfg.get("bluetooth", False),
        audio_volume=int(settings_cfg.get("audio_volume", 70)),
    )
    return DeviceConfig(
        apps=apps,
        home_background_id=cfg.get("home_background_id", "default_void"),
        developer_mode=cfg.get("developer_mode", True),
        load_model=model,
        settings=settings,
        boot_duration_s=float(cfg.get("boot_duration_s", 30.0)),
        factory_packages=cfg.get("factory_packages"),
    )


def _parse_attack(cfg: Optional[dict], device: DeviceConfig, transforms: dict) -> Optional[AttackConfig]:
    if cfg is None:
        return None
    access_cfg = cfg.get("access", {})
    access = AccessChannel(
        mode=AccessMode(access_cfg.get("mode", "wireless_adb")),
        same_network=access_cfg.get("same_network", True),
        user_grant_policy=GrantPolicy.from_config(access_cfg.get("user_grant_policy", "always_grant")),
    )
    strategies = {}
    for pkg, entry in cfg.get("strategies", {}).items():
        strategies[pkg] = ReplicationStrategy(
            kind=StrategyKind(entry.get("kind", "direct_call")),
            capture_fields=entry.get("capture_fields", []),
            crash_popup_on_handoff=entry.get("crash_popup_on_handoff", True),
            dormant_after_capture=entry.get("dormant_after_capture", True),
            transform_set_id=entry.get("transform_set_id"),
            relay_endpoint=entry.get("relay_endpoint"),
            stream_audio=entry.get("stream_audio", True),
            stream_video=entry.get("stream_video", False),
        )
    duty = cfg.get("duty_cycle", {"intercept": 1, "sleep": 0})
    return AttackConfig(
        mode=cfg.get("mode", "script"),
        access=access,
        package_id=cfg.get("package_id", "com.inception.app"),
        strategies=strategies,
        fidelity=cfg.get("fidelity", {}),
        interception_window_ms=int(cfg.get("interception_window_ms", 150)),
        duty_cycle=(int(duty.get("intercept", 1)), int(duty.get("sleep", 0))),
        reactivation_delay_s=cfg.get("reactivation_delay_s"),
        background_candidates=cfg.get("background_candidates", []),
        credentials=cfg.get("credentials", {}),
    )


def _parse_relay(cfg: Optional[dict], transforms: dict) -> Optional[RelayConfig]:
    if cfg is None:
        return None
    delay_cfg = cfg.get("delay", {"min_s": 0.4, "max_s": 0.6})
    delay = DelayModel(min_s=float(delay_cfg["min_s"]), max_s=float(delay_cfg["max_s"]))
    clips = {}
    for clip_id, entry in cfg.get("clips", {}).items():
        frames = [bytes.fromhex(f) for f in entry.get("frames_hex", [])]
        if not frames:
            frames = [bytes([i % 251]) * 160 for i in range(int(entry.get("frame_count", 50)))]
        clips[clip_id] = AudioClip(
            frames=frames,
            label=entry.get("label", clip_id),
            noise_mixed=entry.get("noise_mixed", False),
        )
    library = AudioClipLibrary(clips=clips, matcher=dict(cfg.get("matcher", {})))
    sessions = []
    for entry in cfg.get("sessions", []):
        sess_delay = delay
        if "delay" in entry:
            sess_delay = DelayModel(
                min_s=float(entry["delay"]["min_s"]), max_s=float(entry["delay"]["max_s"])
            )
        sessions.append(
            RelaySessionConfig(
                session_id=entry["session_id"],
                delay=sess_delay,
                start_at_s=float(entry.get("start_at_s", 0.0)),
                traffic=entry.get("traffic", []),
                mode=entry.get("mode", {}),
            )
        )
    return RelayConfig(delay=delay, library=library, sessions=sessions)


def _parse_defense(cfg: Optional[dict]) -> Optional[DefensePolicy]:
    if cfg is None:
        return None
    det = cfg.get("detector", {})
    try:
        detector = DetectorConfig(
            short_lived_home_threshold_ms=int(det.get("short_lived_home_threshold_ms", 2000)),
            min_occurrences=int(det.get("min_occurrences", 3)),
            window_s=float(det.get("window_s", 600.0)),
        )
        return DefensePolicy(
            certificates_enforced=cfg.get("certificates_enforced", False),
            app_calls_validated=cfg.get("app_calls_validated", False),
            restart_period_s=cfg.get("restart_period_s"),
            hard_reset_period_s=cfg.get("hard_reset_period_s"),
            detector_config=detector,
            detectors_enabled=cfg.get("detectors_enabled", True),
        )
    except ValueError as exc:
        raise ScenarioValidationError(str(exc)) from exc


def _validate(scenario: Scenario) -> None:
    scenario.device.home_package()
    installed = {a.package_id for a in scenario.device.apps}
    if scenario.attack is not None:
        for pkg, strategy in scenario.attack.strategies.items():
            if pkg not in installed:
                raise ScenarioValidationError(
                    f"attack.strategies references {pkg!r} which is not installed"
                )
            if strategy.kind == StrategyKind.LOCAL_API_SIM:
                set_id = strategy.transform_set_id
                if set_id is not None and set_id not in scenario.transforms:
                    raise ScenarioValidationError(
                        f"strategy for {pkg!r} references unknown transform set {set_id!r}"
                    )
        if scenario.attack.mode not in ("script", "alt_store"):
            raise ScenarioValidationError(f"unknown attack mode {scenario.attack.mode!r}")
    if scenario.relay is not None:
        for sess in scenario.relay.sessions:
            mode_cfg = sess.mode or {}
            set_id = mode_cfg.get("transform_set_id")
            if set_id is not None and set_id not in scenario.transforms:
                raise ScenarioValidationError(
                    f"relay session {sess.session_id!r} references unknown transform set {set_id!r}"
                )
            clip_id = mode_cfg.get("clip_id")
            if clip_id is not None and clip_id not in scenario.relay.library.clips:
                raise ScenarioValidationError(
                    f"relay session {sess.session_id!r} references unknown clip {clip_id!r}"
                )
    for step in scenario.script:
        if "do" not in step:
            raise ScenarioValidationError(f"script step missing 'do': {step}")


def schema_text() -> str:
    return importlib.resources.files("inceptsim").joinpath("schema.json").read_text("utf-8")

import os

import pytest

from inceptsim.device import (
    AppDescriptor,
    AppKind,
    DeviceState,
    LoadTimeModel,
    Simulator,
)

SCENARIO_DIR = os.path.join(os.path.dirname(__file__), "..", "scenarios")


def scenario_path(name: str) -> str:
    return os.path.abspath(os.path.join(SCENARIO_DIR, f"{name}.json"))


BASE_APPS = [
    AppDescriptor("home_env", "Home", AppKind.HOME, "store", False, 0),
    AppDescriptor("browser", "Quest Browser", AppKind.APP_2D, "store", True, 50_000_000),
    AppDescriptor("beat_saber", "Beat Saber", AppKind.APP_3D, "store", True, 1_000_000_000),
    AppDescriptor("bigscreen", "Bigscreen", AppKind.APP_3D, "store", True, 900_000_000),
    AppDescriptor("vrchat", "VRChat", AppKind.APP_3D, "store", True, 1_200_000_000),
]

LOADS = {
    "home_env": (8.0, 0.7),
    "browser": (8.0, 0.7),
    "beat_saber": (8.10, 0.68),
    "bigscreen": (8.30, 0.64),
    "vrchat": (8.0, 0.7),
    "com.inception.app": (8.0, 0.7),
    "com.fun.game": (8.0, 0.7),
}


def make_simulator(seed=1, developer_mode=True, loads=None, extra_s=1.5) -> Simulator:
    state = DeviceState(
        installed={a.package_id: a for a in BASE_APPS},
        developer_mode=developer_mode,
        home_background_id="winter_lodge",
        rng_seed=seed,
    )
    model = LoadTimeModel(per_app=dict(loads or LOADS), inception_first_extra_s=extra_s)
    return Simulator(state, model, seed=seed)


@pytest.fixture
def sim() -> Simulator:
    return make_simulator()

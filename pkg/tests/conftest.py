import numpy as np
import pytest

from demads import nn_core
from demads.grid_model import Line, NetworkTopology, substation_channel_names, validate_topology
from demads.load_estimation import build_training_set, train_estimator
from demads.orchestrator import GridKnowledge, monitor_period
from demads.presets import DEFAULT_IRRADIANCE, grid_setup, reference_scenario
from demads.rt_detector import RtConfig, build_device_windows, init_rt_model, pretrain
from demads.scenario_sim import MalfunctionSchedule, run_scenario

DEVICE_TRAIN_GRIDS = ("D0", "D1", "D2")
DEVICE_TEST_GRID = "D3"


def two_bus(z=0.01 + 0.005j) -> NetworkTopology:
    return validate_topology(NetworkTopology(2, (Line(0, 1, z.real, z.imag),)))


def five_bus() -> NetworkTopology:
    """Two single-bus feeders plus one two-bus feeder."""
    lines = (Line(0, 1, 0.03, 0.02), Line(1, 2, 0.04, 0.03), Line(0, 3, 0.03, 0.02), Line(0, 4, 0.05, 0.03))
    return validate_topology(NetworkTopology(5, lines))


@pytest.fixture(scope="session")
def grid_a():
    return grid_setup("A")


@pytest.fixture(scope="session")
def estimator_a(grid_a):
    topo, inverters = grid_a
    ts = build_training_set(topo, inverters, 1000, rng_seed=5, irradiance=DEFAULT_IRRADIANCE)
    return train_estimator(ts, nn_core.TrainConfig(optimizer="adam", lr=1e-3, epochs=200, batch_size=32, seed=5))


@pytest.fixture(scope="session")
def inverted_detector():
    """Device detector pre-trained on three reference grids, never on the held-out one."""
    windows = []
    for name in DEVICE_TRAIN_GRIDS:
        windows += build_device_windows(reference_scenario(name, 30, seed=5), "Inverted")
    model = init_rt_model(RtConfig(), seed=0, use_case="Inverted")
    cfg = nn_core.TrainConfig(optimizer="adam", lr=3e-3, epochs=40, batch_size=32, loss="cross_entropy", seed=0)
    model, history = pretrain(model, windows, cfg)
    return model, history


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def knowledge_a(grid_a, estimator_a):
    topo, inverters = grid_a
    return GridKnowledge(topo, tuple(inverters), estimator_a, substation_channel_names(topo), 60)


@pytest.fixture(scope="session")
def inverted_a():
    """35 days on grid A; the PV inverter at bus 7 runs the inverted curve from day 20."""
    return run_scenario(reference_scenario("A", 35, seed=31, schedule=MalfunctionSchedule(7, "Inverted", 20)))


@pytest.fixture(scope="session")
def monitored_a(inverted_a, knowledge_a, inverted_detector):
    states = []
    outcomes = monitor_period(inverted_a, knowledge_a, detectors=[inverted_detector[0]],
                              on_day=lambda o, s: states.append(s))
    return outcomes, states

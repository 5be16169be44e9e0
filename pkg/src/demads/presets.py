"""Reference synthetic grids and scenarios used by the benchmark, the CLI defaults and the tests."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .der_control import PvInverter
from .grid_model import NetworkTopology, random_radial_topology
from .scenario_sim import IrradianceModel, LoadProfileModel, MalfunctionSchedule, ScenarioConfig

DEFAULT_IRRADIANCE = IrradianceModel(
    sunrise_h=6.0, sunset_h=18.0, peak_kw_per_kwp=0.8, cloud_noise_sigma=0.05, day_variability=0.3,
)


def household_loads(topology: NetworkTopology, seed: int, scale: float = 1.0) -> dict[int, LoadProfileModel]:
    """One randomised household-aggregate profile per non-slack bus."""
    rng = np.random.default_rng([seed, 7])
    loads = {}
    for bus in range(1, topology.bus_count):
        loads[bus] = LoadProfileModel(
            base_kw=round(scale * float(rng.uniform(0.2, 0.6)), 4),
            morning_peak_kw=round(scale * float(rng.uniform(0.3, 1.2)), 4),
            evening_peak_kw=round(scale * float(rng.uniform(0.8, 2.0)), 4),
            peak_width_h=round(float(rng.uniform(1.0, 2.0)), 4),
            noise_sigma_kw=round(scale * float(rng.uniform(0.05, 0.2)), 4),
            power_factor=0.95,
            morning_h=round(float(rng.uniform(6.5, 8.5)), 4),
            evening_h=round(float(rng.uniform(18.0, 20.5)), 4),
        )
    return loads


def pv_inverters(topology: NetworkTopology, count: int, seed: int,
                 rated_range: tuple[float, float] = (8.0, 15.0)) -> tuple[PvInverter, ...]:
    """PV units at the far end of the longest feeders (electrically weakest buses)."""
    rng = np.random.default_rng([seed, 11])
    depth = {0: 0.0}
    for ln in topology.lines:
        depth[ln.to_bus] = depth[ln.from_bus] + abs(ln.z)
    children = {ln.from_bus for ln in topology.lines}
    leaves = sorted((b for b in range(1, topology.bus_count) if b not in children), key=lambda b: -depth[b])
    buses = sorted(leaves[:count]) if len(leaves) >= count else sorted(
        sorted(range(1, topology.bus_count), key=lambda b: -depth[b])[:count]
    )
    return tuple(PvInverter(b, round(float(rng.uniform(*rated_range)), 2)) for b in buses)


# name -> (buses, feeders, topology seed, PV units)
GRID_SPECS = {
    "A": (8, 2, 101, 1),
    "B": (11, 3, 202, 1),
    "D0": (12, 3, 301, 4),
    "D1": (14, 4, 302, 4),
    "D2": (10, 3, 303, 4),
    "D3": (11, 3, 304, 3),
}


def grid_setup(name: str) -> tuple[NetworkTopology, tuple[PvInverter, ...]]:
    """Named reference grids: ``A`` and ``B`` for the benchmark, ``D0``..``D3`` for device pre-training."""
    if name not in GRID_SPECS:
        raise KeyError(f"unknown grid setup {name!r}")
    buses, feeders, seed, pv_count = GRID_SPECS[name]
    topo = random_radial_topology(buses, feeders, seed)
    return topo, pv_inverters(topo, pv_count, seed)


def reference_scenario(
    name: str,
    days: int,
    seed: int,
    first_day: int = 0,
    schedule: MalfunctionSchedule | None = None,
    highres_step_s: int = 60,
) -> ScenarioConfig:
    topo, inverters = grid_setup(name)
    return ScenarioConfig(
        topology=topo,
        inverters=inverters,
        loads=household_loads(topo, GRID_SPECS[name][2]),
        irradiance=DEFAULT_IRRADIANCE,
        days=days,
        highres_step_s=highres_step_s,
        meter_step_s=900,
        schedule=schedule,
        seed=seed,
        first_day=first_day,
    )


def with_schedule(config: ScenarioConfig, schedule: MalfunctionSchedule | None) -> ScenarioConfig:
    return replace(config, schedule=schedule)

"""Synthetic day-by-day simulation of an LV grid with household loads and PV.

Randomness: every (seed, day, bus, stream) tuple gets its own generator, so
a day can be re-simulated in isolation and runs with different schedules
share identical loads and PV infeed.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .der_control import (
    ControlCurveVariant,
    PvInverter,
    inverter_from_dict,
    inverter_to_dict,
    variant_setpoint,
)
from .grid_model import (
    NetworkTopology,
    NonConvergence,
    aggregate_substation_batch,
    solve_power_flow_batch,
    substation_channel_names,
    topology_from_dict,
    topology_to_dict,
    validate_topology,
)

log = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400
_LOAD_STREAM = 0
_PV_STREAM = 1
_WEATHER_STREAM = 2


class InvalidCadence(ValueError):
    pass


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class LoadProfileModel:
    base_kw: float = 0.3
    morning_peak_kw: float = 0.8
    evening_peak_kw: float = 1.5
    peak_width_h: float = 1.5
    noise_sigma_kw: float = 0.1
    power_factor: float = 0.95
    morning_h: float = 7.5
    evening_h: float = 19.0

    def __post_init__(self):
        for name in ("base_kw", "morning_peak_kw", "evening_peak_kw", "noise_sigma_kw"):
            if getattr(self, name) < 0:
                raise ScenarioError(f"{name} must be >= 0")
        if not 0 < self.power_factor <= 1:
            raise ScenarioError("power_factor must lie in (0, 1]")

    @property
    def q_per_p(self) -> float:
        return math.tan(math.acos(self.power_factor))


@dataclass(frozen=True)
class IrradianceModel:
    sunrise_h: float = 6.0
    sunset_h: float = 18.0
    peak_kw_per_kwp: float = 0.8
    cloud_noise_sigma: float = 0.05
    # per-day dimming: a day's arc is scaled by 1 - day_variability * U(0, 1)
    day_variability: float = 0.0

    def __post_init__(self):
        if not 0 <= self.sunrise_h < self.sunset_h <= 24:
            raise ScenarioError("need 0 <= sunrise_h < sunset_h <= 24")
        if not 0 < self.peak_kw_per_kwp <= 1:
            raise ScenarioError("peak_kw_per_kwp must lie in (0, 1]")
        if not 0 <= self.day_variability <= 1:
            raise ScenarioError("day_variability must lie in [0, 1]")


@dataclass(frozen=True)
class MalfunctionSchedule:
    inverter_bus: int
    variant: ControlCurveVariant
    start_day: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", ControlCurveVariant(self.variant))
        if self.variant is ControlCurveVariant.CORRECT:
            raise ScenarioError("a malfunction schedule cannot use the Correct curve")
        if self.start_day < 0:
            raise ScenarioError("start_day must be >= 0")


@dataclass(frozen=True)
class ScenarioConfig:
    topology: NetworkTopology
    inverters: tuple[PvInverter, ...]
    loads: Mapping[int, LoadProfileModel]
    irradiance: IrradianceModel = field(default_factory=IrradianceModel)
    days: int = 1
    highres_step_s: int = 60
    meter_step_s: int = 900
    schedule: MalfunctionSchedule | None = None
    seed: int = 0
    first_day: int = 0
    slack_voltage: float = 1.0

    def __post_init__(self):
        if self.days < 1:
            raise ScenarioError("days must be >= 1")
        _check_cadence(self.highres_step_s)
        _check_cadence(self.meter_step_s)
        if self.meter_step_s % self.highres_step_s:
            raise InvalidCadence("meter_step_s must be a multiple of highres_step_s")
        if self.schedule is not None and self.schedule.inverter_bus not in {i.bus for i in self.inverters}:
            raise ScenarioError(f"no inverter at bus {self.schedule.inverter_bus}")

    def day_indices(self) -> list[int]:
        return list(range(self.first_day, self.first_day + self.days))


@dataclass
class MeasurementSet:
    """Simulated measurements, indexed by position in ``days``.

    ``substation`` and ``meters`` are what the field would deliver.
    ``known_pv`` is the PV production the operator is assumed to know.
    ``true_loads_kw`` and ``labels`` are simulation ground truth, used only for
    evaluation and tests.
    """

    days: list[int]
    channel_names: list[str]
    substation: list[np.ndarray]              # per day (T, channels)
    meters: dict[int, list[np.ndarray]]       # bus -> per day (T_meter,)
    inverter_buses: list[int]
    known_pv: list[np.ndarray]                # per day (T, inverters), kW
    highres_step_s: int
    meter_step_s: int
    seed: int
    schedule: MalfunctionSchedule | None = None
    labels: list[str] = field(default_factory=list)
    true_loads_kw: list[np.ndarray] = field(default_factory=list)

    def index_of(self, day: int) -> int:
        return self.days.index(day)

    def substation_day(self, day: int) -> np.ndarray:
        return self.substation[self.index_of(day)]

    def known_pv_day(self, day: int) -> np.ndarray:
        return self.known_pv[self.index_of(day)]

    def meter_series(self, bus: int, day: int) -> np.ndarray:
        return self.meters[bus][self.index_of(day)]

    def censored(self, keep_bus: int) -> "MeasurementSet":
        """Copy holding only one bus's meter series (and nothing else bus-specific)."""
        return MeasurementSet(
            days=list(self.days),
            channel_names=list(self.channel_names),
            substation=[],
            meters={keep_bus: self.meters[keep_bus]},
            inverter_buses=[],
            known_pv=[],
            highres_step_s=self.highres_step_s,
            meter_step_s=self.meter_step_s,
            seed=self.seed,
        )


def _check_cadence(step_s: int) -> None:
    if step_s <= 0 or SECONDS_PER_DAY % step_s:
        raise InvalidCadence(f"step {step_s}s does not divide a day")


def _hours(step_s: int) -> np.ndarray:
    _check_cadence(step_s)
    return np.arange(SECONDS_PER_DAY // step_s) * (step_s / 3600.0)


def _rng(seed: int, day: int, bus: int, stream: int) -> np.random.Generator:
    # bus may be negative for grid-wide streams
    return np.random.default_rng([seed, day, bus + 1_000_000, stream])


def generate_load_profile(model: LoadProfileModel, day: int, step_s: int, seed: int, bus: int = 0) -> np.ndarray:
    """Household active power (kW): base load plus morning and evening Gaussian bumps plus noise."""
    h = _hours(step_s)
    p = np.full_like(h, model.base_kw)
    if model.peak_width_h > 0:
        w2 = 2.0 * model.peak_width_h ** 2
        p = p + model.morning_peak_kw * np.exp(-((h - model.morning_h) ** 2) / w2)
        p = p + model.evening_peak_kw * np.exp(-((h - model.evening_h) ** 2) / w2)
    if model.noise_sigma_kw > 0:
        p = p + model.noise_sigma_kw * _rng(seed, day, bus, _LOAD_STREAM).standard_normal(h.size)
    return np.maximum(p, 0.0)


def clear_sky_shape(model: IrradianceModel, step_s: int) -> np.ndarray:
    """Sine-squared daylight arc, 1.0 at solar noon, 0 at night."""
    h = _hours(step_s)
    span = model.sunset_h - model.sunrise_h
    arc = np.sin(np.pi * (h - model.sunrise_h) / span) ** 2
    return np.where((h > model.sunrise_h) & (h < model.sunset_h), arc, 0.0)


def day_dimming(model: IrradianceModel, day: int, seed: int) -> float:
    if model.day_variability == 0:
        return 1.0
    return 1.0 - model.day_variability * float(_rng(seed, day, -1, _WEATHER_STREAM).random())


def generate_pv_profile(
    model: IrradianceModel, capacity_kwp: float, day: int, step_s: int, seed: int, bus: int = 0
) -> np.ndarray:
    """PV active power (kW) for one day."""
    shape = clear_sky_shape(model, step_s)
    p = capacity_kwp * model.peak_kw_per_kwp * day_dimming(model, day, seed) * shape
    if model.cloud_noise_sigma > 0:
        noise = _rng(seed, day, bus, _PV_STREAM).standard_normal(shape.size)
        p = p * np.clip(1.0 + model.cloud_noise_sigma * noise, 0.0, 1.0)
    return p


def active_variants(config: ScenarioConfig, day: int) -> list[ControlCurveVariant]:
    out = []
    sched = config.schedule
    for inv in config.inverters:
        if sched is not None and inv.bus == sched.inverter_bus and day >= sched.start_day:
            out.append(sched.variant)
        else:
            out.append(inv.variant)
    return out


def day_label(variants: list[ControlCurveVariant]) -> str:
    faulty = sorted({v.value for v in variants if v is not ControlCurveVariant.CORRECT})
    if not faulty:
        return ControlCurveVariant.CORRECT.value
    return faulty[0] if len(faulty) == 1 else "Abnormal"


def bus_demand(
    topology: NetworkTopology,
    inverters: tuple[PvInverter, ...] | list[PvInverter],
    variants: list[ControlCurveVariant],
    load_p_kw: np.ndarray,
    load_q_kvar: np.ndarray,
    pv_kw: np.ndarray,
) -> np.ndarray:
    """Complex per-unit bus demand (T, buses) from loads, PV infeed and inverter setpoints."""
    p = np.array(load_p_kw, dtype=float)
    q = np.array(load_q_kvar, dtype=float)
    for k, (inv, variant) in enumerate(zip(inverters, variants)):
        p_frac = pv_kw[:, k] / inv.rated_kw
        q_gen = variant_setpoint(inv, p_frac, variant) * inv.rated_kw
        p[:, inv.bus] -= pv_kw[:, k]
        q[:, inv.bus] -= q_gen
    return (p + 1j * q) / topology.base_power


def simulate_day(
    topology: NetworkTopology,
    inverters,
    variants,
    load_p_kw: np.ndarray,
    load_q_kvar: np.ndarray,
    pv_kw: np.ndarray,
    slack_voltage: float = 1.0,
    context: str = "",
):
    """Solve every timestep of a day; returns (substation channels, |V| per bus)."""
    demand = bus_demand(topology, inverters, variants, load_p_kw, load_q_kvar, pv_kw)
    try:
        result = solve_power_flow_batch(topology, demand, slack_voltage)
    except NonConvergence as exc:
        raise NonConvergence(exc.residual, exc.iterations, f"{context} {exc.context}".strip()) from exc
    return aggregate_substation_batch(result, topology), np.abs(result.voltages)


def run_scenario(config: ScenarioConfig) -> MeasurementSet:
    topo = config.topology if config.topology.validated else validate_topology(config.topology)
    n = topo.bus_count
    step = config.highres_step_s
    per_meter = config.meter_step_s // step
    steps = SECONDS_PER_DAY // step
    ms = MeasurementSet(
        days=config.day_indices(),
        channel_names=substation_channel_names(topo),
        substation=[],
        meters={b: [] for b in range(1, n)},
        inverter_buses=[inv.bus for inv in config.inverters],
        known_pv=[],
        highres_step_s=step,
        meter_step_s=config.meter_step_s,
        seed=config.seed,
        schedule=config.schedule,
    )
    for day in ms.days:
        load_p = np.zeros((steps, n))
        load_q = np.zeros((steps, n))
        for bus, model in config.loads.items():
            if not 0 < bus < n:
                raise ScenarioError(f"load attached to invalid bus {bus}")
            load_p[:, bus] = generate_load_profile(model, day, step, config.seed, bus)
            load_q[:, bus] = load_p[:, bus] * model.q_per_p
        pv = np.zeros((steps, len(config.inverters)))
        for k, inv in enumerate(config.inverters):
            pv[:, k] = generate_pv_profile(config.irradiance, inv.rated_kw, day, step, config.seed, inv.bus)
        variants = active_variants(config, day)
        channels, vmag = simulate_day(
            topo, config.inverters, variants, load_p, load_q, pv,
            config.slack_voltage, context=f"day {day}",
        )
        ms.substation.append(channels)
        for bus in range(1, n):
            ms.meters[bus].append(vmag[::per_meter, bus].copy())
        ms.known_pv.append(pv)
        ms.true_loads_kw.append(load_p)
        ms.labels.append(day_label(variants))
        log.debug("simulated day %d (%s)", day, ms.labels[-1])
    return ms


# --- files -----------------------------------------------------------------

def grid_to_dict(topology: NetworkTopology, inverters) -> dict:
    data = topology_to_dict(topology)
    data["inverters"] = [inverter_to_dict(inv) for inv in inverters]
    return data


def grid_from_dict(data: dict) -> tuple[NetworkTopology, tuple[PvInverter, ...]]:
    topo = topology_from_dict(data)
    inverters = tuple(inverter_from_dict(d) for d in data.get("inverters", []))
    for inv in inverters:
        if not 0 < inv.bus < topo.bus_count:
            raise ScenarioError(f"inverter at invalid bus {inv.bus}")
    return topo, inverters


def load_grid_file(path) -> tuple[NetworkTopology, tuple[PvInverter, ...]]:
    with open(path) as fh:
        return grid_from_dict(json.load(fh))


def scenario_from_dict(data: dict, base_dir: Path | None = None) -> ScenarioConfig:
    grid = data["grid"]
    if isinstance(grid, str):
        path = Path(grid)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        topo, inverters = load_grid_file(path)
    else:
        topo, inverters = grid_from_dict(grid)
    loads_cfg = data.get("loads", {})
    default = loads_cfg.get("default")
    per_bus = {int(k): v for k, v in loads_cfg.get("buses", {}).items()}
    loads = {}
    for bus in range(1, topo.bus_count):
        spec = per_bus.get(bus, default)
        if spec is not None:
            loads[bus] = LoadProfileModel(**spec)
    sched = data.get("schedule")
    return ScenarioConfig(
        topology=topo,
        inverters=inverters,
        loads=loads,
        irradiance=IrradianceModel(**data.get("irradiance", {})),
        days=int(data.get("days", 1)),
        highres_step_s=int(data.get("highres_step_s", 60)),
        meter_step_s=int(data.get("meter_step_s", 900)),
        schedule=MalfunctionSchedule(**sched) if sched else None,
        seed=int(data.get("seed", 0)),
        first_day=int(data.get("first_day", 0)),
        slack_voltage=float(data.get("slack_voltage", 1.0)),
    )


def scenario_to_dict(config: ScenarioConfig) -> dict:
    loads = {str(b): asdict(m) for b, m in sorted(config.loads.items())}
    sched = None
    if config.schedule is not None:
        sched = {
            "inverter_bus": config.schedule.inverter_bus,
            "variant": config.schedule.variant.value,
            "start_day": config.schedule.start_day,
        }
    return {
        "grid": grid_to_dict(config.topology, config.inverters),
        "loads": {"buses": loads},
        "irradiance": asdict(config.irradiance),
        "days": config.days,
        "first_day": config.first_day,
        "highres_step_s": config.highres_step_s,
        "meter_step_s": config.meter_step_s,
        "schedule": sched,
        "seed": config.seed,
        "slack_voltage": config.slack_voltage,
    }


def _write_csv(path: Path, header: list[str], timestamps: np.ndarray, values: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for ts, row in zip(timestamps, values):
            fh.write(str(int(ts)) + "," + ",".join(repr(float(v)) for v in row) + "\n")


def _read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    values = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header[1:], values[:, 1:]


def write_measurements(ms: MeasurementSet, out_dir) -> list[Path]:
    """One CSV per day per stream plus ``metadata.json``. Returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    meter_buses = sorted(ms.meters)
    for i, day in enumerate(ms.days):
        base = day * SECONDS_PER_DAY
        sub = ms.substation[i]
        ts = base + np.arange(len(sub)) * ms.highres_step_s
        p = out / f"substation_day{day:03d}.csv"
        _write_csv(p, ["timestamp"] + ms.channel_names, ts, sub)
        written.append(p)
        if meter_buses:
            mat = np.stack([ms.meters[b][i] for b in meter_buses], axis=1)
            ts_m = base + np.arange(len(mat)) * ms.meter_step_s
            p = out / f"meters_day{day:03d}.csv"
            _write_csv(p, ["timestamp"] + [str(b) for b in meter_buses], ts_m, mat)
            written.append(p)
        if ms.inverter_buses:
            p = out / f"pv_day{day:03d}.csv"
            _write_csv(p, ["timestamp"] + [f"pv{b}" for b in ms.inverter_buses], ts, ms.known_pv[i])
            written.append(p)
    meta = {
        "days": ms.days,
        "channel_names": ms.channel_names,
        "meter_buses": meter_buses,
        "inverter_buses": ms.inverter_buses,
        "highres_step_s": ms.highres_step_s,
        "meter_step_s": ms.meter_step_s,
        "seed": ms.seed,
        "schedule": None if ms.schedule is None else {
            "inverter_bus": ms.schedule.inverter_bus,
            "variant": ms.schedule.variant.value,
            "start_day": ms.schedule.start_day,
        },
        "labels": ms.labels,
    }
    p = out / "metadata.json"
    p.write_text(json.dumps(meta, indent=2) + "\n")
    written.append(p)
    return written


def read_measurements(in_dir) -> MeasurementSet:
    src = Path(in_dir)
    meta = json.loads((src / "metadata.json").read_text())
    sched = meta.get("schedule")
    ms = MeasurementSet(
        days=list(meta["days"]),
        channel_names=list(meta["channel_names"]),
        substation=[],
        meters={int(b): [] for b in meta["meter_buses"]},
        inverter_buses=list(meta["inverter_buses"]),
        known_pv=[],
        highres_step_s=int(meta["highres_step_s"]),
        meter_step_s=int(meta["meter_step_s"]),
        seed=int(meta["seed"]),
        schedule=MalfunctionSchedule(**sched) if sched else None,
        labels=list(meta.get("labels", [])),
    )
    for day in ms.days:
        names, sub = _read_csv(src / f"substation_day{day:03d}.csv")
        if names != ms.channel_names:
            raise ScenarioError(f"channel mismatch in day {day}")
        ms.substation.append(sub)
        if ms.meters:
            buses, mat = _read_csv(src / f"meters_day{day:03d}.csv")
            for col, b in enumerate(buses):
                ms.meters[int(b)].append(mat[:, col].copy())
        if ms.inverter_buses:
            _, pv = _read_csv(src / f"pv_day{day:03d}.csv")
            ms.known_pv.append(pv)
        else:
            ms.known_pv.append(np.zeros((len(sub), 0)))
    return ms

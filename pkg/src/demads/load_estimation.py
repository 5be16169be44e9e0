"""Neural load disaggregation: substation channels -> per-bus active loads.

The estimator is trained purely on power-flow simulations of the target
topology with random loads, so it needs no smart-meter data.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import nn_core
from .der_control import ControlCurveVariant, PvInverter
from .feature_pipeline import Standardizer, fit_standardizer_matrix
from .grid_model import (
    NetworkTopology,
    NonConvergence,
    aggregate_substation,
    aggregate_substation_batch,
    solve_power_flow,
    solve_power_flow_batch,
    substation_channel_names,
    topology_fingerprint,
)
from .scenario_sim import IrradianceModel, bus_demand

log = logging.getLogger(__name__)

TIME_FEATURES = ("tod_sin", "tod_cos", "pv_total_kw")
MAX_REDRAWS = 20


class SpecMismatch(ValueError):
    pass


class FingerprintMismatch(ValueError):
    pass


@dataclass
class SyntheticTrainingSet:
    inputs: np.ndarray   # (n, channels + 3)
    targets: np.ndarray  # (n, load buses) kW
    channel_names: list[str]
    load_buses: list[int]
    generator_seed: int
    topology_fingerprint: str
    # per-sample demand actually simulated, kept for self-consistency checks
    demand: np.ndarray = field(repr=False, default_factory=lambda: np.zeros((0, 0), complex))

    @property
    def input_names(self) -> list[str]:
        return self.channel_names + list(TIME_FEATURES)


def time_features(hour, pv_total_kw) -> np.ndarray:
    hour = np.asarray(hour, dtype=float)
    ang = 2.0 * np.pi * hour / 24.0
    return np.stack([np.sin(ang), np.cos(ang), np.broadcast_to(pv_total_kw, ang.shape)], axis=-1)


def build_training_set(
    topology: NetworkTopology,
    inverters: Sequence[PvInverter],
    n_samples: int,
    load_range_kw: tuple[float, float] = (0.0, 4.0),
    rng_seed: int = 0,
    irradiance: IrradianceModel | None = None,
    power_factor: float = 0.95,
    load_buses: Sequence[int] | None = None,
    slack_voltage: float = 1.0,
) -> SyntheticTrainingSet:
    """Random operating points solved through the power flow.

    Each sample draws a time of day, independent uniform loads per bus and a
    PV output between zero and the clear-sky value of that hour. Inverters
    follow their correct curve.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    irradiance = irradiance or IrradianceModel()
    buses = list(load_buses) if load_buses is not None else list(range(1, topology.bus_count))
    rng = np.random.default_rng(rng_seed)
    q_per_p = math.tan(math.acos(power_factor))
    correct = [ControlCurveVariant.CORRECT] * len(inverters)

    def draw(k):
        hour = rng.uniform(0.0, 24.0, k)
        loads = rng.uniform(load_range_kw[0], load_range_kw[1], (k, len(buses)))
        span = irradiance.sunset_h - irradiance.sunrise_h
        arc = np.where(
            (hour > irradiance.sunrise_h) & (hour < irradiance.sunset_h),
            np.sin(np.pi * (hour - irradiance.sunrise_h) / span) ** 2,
            0.0,
        )
        pv = np.stack(
            [inv.rated_kw * irradiance.peak_kw_per_kwp * arc * rng.uniform(0.0, 1.0, k) for inv in inverters],
            axis=1,
        ) if inverters else np.zeros((k, 0))
        return hour, loads, pv

    def demand_of(loads, pv):
        p = np.zeros((len(loads), topology.bus_count))
        p[:, buses] = loads
        return bus_demand(topology, inverters, correct, p, p * q_per_p, pv)

    hour, loads, pv = draw(n_samples)
    demand = demand_of(loads, pv)
    try:
        result = solve_power_flow_batch(topology, demand, slack_voltage)
        channels = aggregate_substation_batch(result, topology)
    except NonConvergence:
        channels = np.zeros((n_samples, len(substation_channel_names(topology))))
        for i in range(n_samples):
            for attempt in range(MAX_REDRAWS + 1):
                try:
                    res = solve_power_flow_batch(topology, demand[i:i + 1], slack_voltage)
                    channels[i] = aggregate_substation_batch(res, topology)[0]
                    break
                except NonConvergence:
                    if attempt == MAX_REDRAWS:
                        raise
                    h, l, p = draw(1)
                    hour[i], loads[i], pv[i] = h[0], l[0], p[0]
                    demand[i] = demand_of(l, p)[0]
    inputs = np.concatenate([channels, time_features(hour, pv.sum(axis=1))], axis=1)
    return SyntheticTrainingSet(
        inputs=inputs,
        targets=loads,
        channel_names=substation_channel_names(topology),
        load_buses=buses,
        generator_seed=rng_seed,
        topology_fingerprint=topology_fingerprint(topology),
        demand=demand,
    )


@dataclass
class LoadEstimator:
    mlp: nn_core.Mlp
    channel_names: list[str]
    load_buses: list[int]
    input_norm: Standardizer
    output_norm: Standardizer
    topology_fingerprint: str
    holdout_mae: np.ndarray          # per load bus, kW
    baseline_mae: np.ndarray         # predict-the-mean on the same holdout
    power_factor: float = 0.95

    @property
    def input_spec(self) -> list[str]:
        return self.channel_names + list(TIME_FEATURES)

    def predict_raw(self, inputs: np.ndarray) -> np.ndarray:
        z = self.input_norm.apply(inputs)
        return self.output_norm.inverse(nn_core.forward(self.mlp, np.atleast_2d(z)))

    def to_dict(self) -> dict:
        data = nn_core.mlp_to_dict(self.mlp)
        data.update({
            "input_spec": self.input_spec,
            "output_spec": [f"p_load{b}_kw" for b in self.load_buses],
            "load_buses": self.load_buses,
            "normalizer": {"input": self.input_norm.to_dict(), "output": self.output_norm.to_dict()},
            "topology_fingerprint": self.topology_fingerprint,
            "holdout_mae": self.holdout_mae.tolist(),
            "baseline_mae": self.baseline_mae.tolist(),
            "power_factor": self.power_factor,
        })
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "LoadEstimator":
        spec = data["input_spec"]
        return cls(
            mlp=nn_core.mlp_from_dict(data),
            channel_names=spec[: len(spec) - len(TIME_FEATURES)],
            load_buses=[int(b) for b in data["load_buses"]],
            input_norm=Standardizer.from_dict(data["normalizer"]["input"]),
            output_norm=Standardizer.from_dict(data["normalizer"]["output"]),
            topology_fingerprint=data["topology_fingerprint"],
            holdout_mae=np.array(data["holdout_mae"], dtype=float),
            baseline_mae=np.array(data["baseline_mae"], dtype=float),
            power_factor=float(data["power_factor"]),
        )


def split_indices(n: int, holdout_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_hold = int(round(n * holdout_fraction))
    if n_hold and n - n_hold < 1:
        raise ValueError("holdout leaves no training samples")
    return perm[n_hold:], perm[:n_hold]


def train_estimator(
    training_set: SyntheticTrainingSet,
    config: nn_core.TrainConfig | None = None,
    hidden: Sequence[int] = (32, 32),
    activation: str = "tanh",
    holdout_fraction: float = 0.2,
    power_factor: float = 0.95,
) -> LoadEstimator:
    config = config or nn_core.TrainConfig(optimizer="adam", lr=1e-3, epochs=200, batch_size=32, loss="mse")
    x, y = training_set.inputs, training_set.targets
    if len(x) < 2:
        raise ValueError("training set too small")
    train_idx, hold_idx = split_indices(len(x), holdout_fraction, config.seed)
    in_norm = fit_standardizer_matrix(x[train_idx])
    out_norm = fit_standardizer_matrix(y[train_idx])
    sizes = [x.shape[1], *hidden, y.shape[1]]
    acts = [activation] * len(hidden) + ["identity"]
    mlp = nn_core.init_mlp(sizes, acts, seed=config.seed)
    nn_core.train(mlp, in_norm.apply(x[train_idx]), out_norm.apply(y[train_idx]), config)
    est = LoadEstimator(
        mlp=mlp,
        channel_names=list(training_set.channel_names),
        load_buses=list(training_set.load_buses),
        input_norm=in_norm,
        output_norm=out_norm,
        topology_fingerprint=training_set.topology_fingerprint,
        holdout_mae=np.zeros(y.shape[1]),
        baseline_mae=np.zeros(y.shape[1]),
        power_factor=power_factor,
    )
    eval_idx = hold_idx if len(hold_idx) else train_idx
    pred = est.predict_raw(x[eval_idx])
    est.holdout_mae = np.abs(pred - y[eval_idx]).mean(axis=0)
    est.baseline_mae = np.abs(y[train_idx].mean(axis=0) - y[eval_idx]).mean(axis=0)
    log.info("load estimator holdout MAE %.4f kW (baseline %.4f kW)",
             est.holdout_mae.mean(), est.baseline_mae.mean())
    return est


def estimate_loads(
    estimator: LoadEstimator,
    record: Mapping[str, float | np.ndarray],
    hour,
    pv_total_kw,
) -> np.ndarray:
    """Per-bus active load estimates (kW, clamped at zero); shape (T, load buses) or (load buses,)."""
    missing = [ch for ch in estimator.channel_names if ch not in record]
    if missing:
        raise SpecMismatch(f"record lacks channels {missing}")
    cols = [np.asarray(record[ch], dtype=float) for ch in estimator.channel_names]
    single = cols[0].ndim == 0
    mat = np.column_stack([np.atleast_1d(c) for c in cols])
    feats = np.concatenate([mat, np.atleast_2d(time_features(hour, pv_total_kw))], axis=1)
    out = np.maximum(estimator.predict_raw(feats), 0.0)
    return out[0] if single else out


def estimate_day(
    estimator: LoadEstimator,
    day_matrix: np.ndarray,
    channel_names: Sequence[str],
    step_s: int,
    pv_total_kw: np.ndarray,
) -> np.ndarray:
    """Estimates for every timestep of one day of substation data."""
    record = {name: day_matrix[:, k] for k, name in enumerate(channel_names)}
    hour = np.arange(len(day_matrix)) * step_s / 3600.0
    return estimate_loads(estimator, record, hour, pv_total_kw)


def reactive_from_active(estimator: LoadEstimator, p_kw: np.ndarray) -> np.ndarray:
    return p_kw * math.tan(math.acos(estimator.power_factor))


def save_estimator(estimator: LoadEstimator, path) -> None:
    with open(path, "w") as fh:
        json.dump(estimator.to_dict(), fh)


def load_estimator(path, topology: NetworkTopology | None = None) -> LoadEstimator:
    with open(path) as fh:
        est = LoadEstimator.from_dict(json.load(fh))
    if topology is not None and topology_fingerprint(topology) != est.topology_fingerprint:
        raise FingerprintMismatch(
            f"estimator was trained for topology {est.topology_fingerprint}, "
            f"got {topology_fingerprint(topology)}"
        )
    return est


def resolve_sample(training_set: SyntheticTrainingSet, topology: NetworkTopology, row: int) -> dict[str, float]:
    """Re-solve one recorded sample on its own; used to check dataset self-consistency."""
    res = solve_power_flow(topology, training_set.demand[row])
    return aggregate_substation(res, topology)

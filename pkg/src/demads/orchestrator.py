"""Daily monitoring protocol.

Central path (substation data only): keep a rolling window of days judged
regular, disaggregate each into loads, re-simulate it with every malfunction
curve, and retrain the SVM on measured + simulated days. Each new day is
classified before it may enter the window.

Device path (one bus's meter series only): pre-trained detectors raise flags,
which are fused with the central verdict.
"""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .der_control import MALFUNCTIONS, ControlCurveVariant, PvInverter
from .feature_pipeline import MEASURED, SIMULATED, DailySample, condense_day
from .grid_model import NetworkTopology, topology_fingerprint
from .load_estimation import FingerprintMismatch, LoadEstimator, estimate_day, reactive_from_active
from .rt_detector import DeviceFlag, MeterWindow, RtModel, detect
from .scenario_sim import MeasurementSet, simulate_day
from .svm_detector import Kernel, MultiClassSvm, predict_multiclass, train_multiclass

log = logging.getLogger(__name__)

CORRECT = ControlCurveVariant.CORRECT.value


class CalibrationIncomplete(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    window_days: int = 14
    malfunction_classes: tuple[str, ...] = tuple(v.value for v in MALFUNCTIONS)
    kernel: Kernel = field(default_factory=Kernel)
    C: float = 10.0
    svm_seed: int = 0
    # inverters re-simulated with the faulty curve; None means all of them
    counterfactual_buses: tuple[int, ...] | None = None
    # days classified as malfunction stay out of the window
    exclude_suspect_days: bool = True
    detector_threshold: float = 0.5
    # correction passes that rescale estimated loads to the measured feeder active power
    balance_iterations: int = 3

    def __post_init__(self):
        if self.window_days < 1:
            raise ValueError("window_days must be >= 1")
        bad = set(self.malfunction_classes) - {v.value for v in MALFUNCTIONS}
        if bad or not self.malfunction_classes:
            raise ValueError(f"invalid malfunction classes {sorted(bad)}")
        if self.balance_iterations < 0:
            raise ValueError("balance_iterations must be >= 0")


@dataclass
class GridKnowledge:
    """What the operator knows centrally: topology, installed PV and the load estimator."""

    topology: NetworkTopology
    inverters: tuple[PvInverter, ...]
    estimator: LoadEstimator
    channel_names: list[str]
    step_s: int
    slack_voltage: float = 1.0

    def __post_init__(self):
        if self.estimator.topology_fingerprint != topology_fingerprint(self.topology):
            raise FingerprintMismatch("load estimator belongs to a different topology")
        if list(self.estimator.channel_names) != list(self.channel_names):
            raise FingerprintMismatch("substation channels do not match the estimator input spec")


@dataclass(frozen=True)
class SubstationDay:
    """Central-path input for one day: substation channels and known PV production."""

    day: int
    channels: np.ndarray  # (T, channels)
    known_pv: np.ndarray  # (T, inverters) kW


@dataclass
class Counterfactual:
    samples: list[DailySample]
    estimated_loads_kw: np.ndarray  # (T, buses)


@dataclass
class RollingWindow:
    capacity: int = 14
    measured: list[DailySample] = field(default_factory=list)
    simulated: dict[int, list[DailySample]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.measured)

    @property
    def days(self) -> list[int]:
        return [s.day for s in self.measured]

    def copy(self) -> "RollingWindow":
        return RollingWindow(self.capacity, list(self.measured), {d: list(v) for d, v in self.simulated.items()})

    def add(self, sample: DailySample, counterparts: Sequence[DailySample]) -> DailySample | None:
        """Append a measured regular day; returns the evicted day's sample if the window was full."""
        if sample.provenance != MEASURED or sample.label != CORRECT:
            raise ValueError("only measured, regular days may enter the window")
        if self.measured and sample.day <= self.measured[-1].day:
            raise ValueError("window days must be strictly increasing")
        evicted = None
        if len(self.measured) >= self.capacity:
            evicted = self.measured.pop(0)
            self.simulated.pop(evicted.day, None)
        self.measured.append(sample)
        self.simulated[sample.day] = list(counterparts)
        return evicted

    def training_samples(self) -> list[DailySample]:
        out = list(self.measured)
        for s in self.measured:
            out += self.simulated.get(s.day, [])
        return out


@dataclass
class DailyCycleReport:
    day: int
    transformer_verdict: str
    training_size: int
    class_counts: dict[str, int]
    window_size_after: int
    window_days: list[int]
    retrained: bool


@dataclass(frozen=True)
class FusionVerdict:
    kind: str  # ConsistentCorrect | ConfirmedLocalized | TransformerOnly | DeviceOnly | Contradiction
    bus: int | None = None
    label: str | None = None
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.bus is not None:
            out["bus"] = self.bus
        if self.label is not None:
            out["class"] = self.label
        if self.details:
            out["details"] = self.details
        return out


@dataclass
class CentralState:
    window: RollingWindow
    svm: MultiClassSvm


# --- central path -----------------------------------------------------------------

def condense_measured(day: SubstationDay, label: str = CORRECT) -> DailySample:
    return DailySample(condense_day(day.channels), label, day.day, MEASURED)


def balance_to_feeders(
    knowledge: GridKnowledge,
    channels: np.ndarray,
    load_p_kw: np.ndarray,
    known_pv: np.ndarray,
    iterations: int = 3,
) -> np.ndarray:
    """Shift estimated loads so the simulated feeder active power matches the measurement.

    The substation measures each feeder's P exactly, so the estimator's error
    on the per-feeder load sum can be removed. The mismatch is spread over the
    feeder's buses in proportion to their estimate (evenly where the estimate
    is all zero), and the power flow is re-run to pick up the losses.
    """
    topo = knowledge.topology
    heads = topo.feeder_heads()
    feeder = np.array(topo.feeder_of())
    col = {name: k for k, name in enumerate(knowledge.channel_names)}
    measured = np.stack([channels[:, col[f"p_feeder{h}"]] for h in heads], axis=1)
    correct = [ControlCurveVariant.CORRECT] * len(knowledge.inverters)
    load_p = load_p_kw.copy()
    for _ in range(iterations):
        sim, _ = simulate_day(
            topo, knowledge.inverters, correct, load_p, reactive_from_active(knowledge.estimator, load_p),
            known_pv, knowledge.slack_voltage, context="feeder balancing",
        )
        simulated = np.stack([sim[:, col[f"p_feeder{h}"]] for h in heads], axis=1)
        gap_kw = (measured - simulated) * topo.base_power
        for k, h in enumerate(heads):
            buses = np.flatnonzero(feeder == h)
            part = load_p[:, buses]
            total = part.sum(axis=1, keepdims=True)
            share = np.where(total > 0, part / np.where(total > 0, total, 1.0), 1.0 / len(buses))
            load_p[:, buses] = np.maximum(part + gap_kw[:, k:k + 1] * share, 0.0)
    return load_p


def simulate_counterparts(
    knowledge: GridKnowledge, day: SubstationDay, config: PipelineConfig
) -> Counterfactual:
    """Estimate the day's loads and re-simulate it once per malfunction class."""
    topo = knowledge.topology
    est = knowledge.estimator
    p_hat = estimate_day(est, day.channels, knowledge.channel_names, knowledge.step_s, day.known_pv.sum(axis=1))
    load_p = np.zeros((len(day.channels), topo.bus_count))
    load_p[:, est.load_buses] = p_hat
    if config.balance_iterations:
        load_p = balance_to_feeders(knowledge, day.channels, load_p, day.known_pv, config.balance_iterations)
    load_q = reactive_from_active(est, load_p)
    targets = set(config.counterfactual_buses or [inv.bus for inv in knowledge.inverters])
    samples = []
    for cls in config.malfunction_classes:
        variants = [
            ControlCurveVariant(cls) if inv.bus in targets else ControlCurveVariant.CORRECT
            for inv in knowledge.inverters
        ]
        channels, _ = simulate_day(
            topo, knowledge.inverters, variants, load_p, load_q, day.known_pv,
            knowledge.slack_voltage, context=f"counterfactual {cls} day {day.day}",
        )
        samples.append(DailySample(condense_day(channels), cls, day.day, SIMULATED))
    return Counterfactual(samples, load_p)


def train_window_svm(window: RollingWindow, config: PipelineConfig) -> MultiClassSvm:
    return train_multiclass(window.training_samples(), config.kernel, config.C, seed=config.svm_seed)


def calibrate(
    days: Sequence[SubstationDay], knowledge: GridKnowledge, config: PipelineConfig = PipelineConfig()
) -> tuple[CentralState, DailyCycleReport]:
    """Build the first window from ``window_days`` days assumed regular and train the SVM."""
    if len(days) < config.window_days:
        raise CalibrationIncomplete(f"need {config.window_days} calibration days, got {len(days)}")
    window = RollingWindow(config.window_days)
    for d in days[: config.window_days]:
        cf = simulate_counterparts(knowledge, d, config)
        window.add(condense_measured(d), cf.samples)
    svm = train_window_svm(window, config)
    report = _report(days[config.window_days - 1].day, CORRECT, window, True)
    return CentralState(window, svm), report


def _report(day: int, verdict: str, window: RollingWindow, retrained: bool) -> DailyCycleReport:
    samples = window.training_samples()
    return DailyCycleReport(
        day=day,
        transformer_verdict=verdict,
        training_size=len(samples),
        class_counts=dict(sorted(Counter(s.label for s in samples).items())),
        window_size_after=len(window),
        window_days=window.days,
        retrained=retrained,
    )


def run_daily_cycle(
    state: CentralState, day: SubstationDay, knowledge: GridKnowledge, config: PipelineConfig = PipelineConfig()
) -> tuple[DailyCycleReport, CentralState]:
    """Classify the new day; regular days join the window and trigger a retrain."""
    sample = condense_measured(day)
    verdict = predict_multiclass(state.svm, sample.features)
    if verdict != CORRECT and config.exclude_suspect_days:
        return _report(day.day, verdict, state.window, False), state
    window = state.window.copy()
    cf = simulate_counterparts(knowledge, day, config)
    window.add(sample, cf.samples)
    svm = train_window_svm(window, config)
    return _report(day.day, verdict, window, True), CentralState(window, svm)


# --- device path and fusion --------------------------------------------------------

def device_flags(
    detectors: Sequence[RtModel],
    buses: Sequence[int],
    day: int,
    meter_series: Callable[[int, int], np.ndarray],
    threshold: float = 0.5,
) -> list[DeviceFlag]:
    """Run every detector at every bus; each call sees only that bus's own series."""
    flags = []
    for bus in buses:
        window = MeterWindow(meter_series(bus, day), bus, day)
        for model in detectors:
            flag = detect(model, window, threshold)
            if flag is not None:
                flags.append(flag)
    return flags


def fuse(transformer_verdict: str, flags: Sequence[DeviceFlag]) -> FusionVerdict:
    """Combine the central verdict with the day's device flags."""
    if not flags:
        if transformer_verdict == CORRECT:
            return FusionVerdict("ConsistentCorrect")
        return FusionVerdict("TransformerOnly", label=transformer_verdict)
    ranked = sorted(flags, key=lambda f: (-f.probability, f.bus, f.use_case))
    top = ranked[0]
    details = {}
    if len(ranked) > 1:
        details["other_flags"] = [f.to_dict() for f in ranked[1:]]
    if transformer_verdict == CORRECT:
        return FusionVerdict("DeviceOnly", bus=top.bus, label=top.use_case, details=details)
    if top.use_case == transformer_verdict:
        return FusionVerdict("ConfirmedLocalized", bus=top.bus, label=top.use_case, details=details)
    details.update({"transformer": transformer_verdict, "device": top.to_dict()})
    return FusionVerdict("Contradiction", details=details)


# --- whole period ----------------------------------------------------------------

def substation_days(ms: MeasurementSet) -> list[SubstationDay]:
    return [SubstationDay(d, ms.substation[i], ms.known_pv[i]) for i, d in enumerate(ms.days)]


@dataclass
class DayOutcome:
    report: DailyCycleReport
    flags: list[DeviceFlag]
    fusion: FusionVerdict

    def to_dict(self) -> dict:
        return {
            "day": self.report.day,
            "transformer_verdict": self.report.transformer_verdict,
            "flags": [f.to_dict() for f in self.flags],
            "fusion": self.fusion.to_dict(),
            "window_size": self.report.window_size_after,
            "training_counts": self.report.class_counts,
        }


def monitor_period(
    ms: MeasurementSet,
    knowledge: GridKnowledge,
    detectors: Sequence[RtModel] = (),
    device_buses: Sequence[int] | None = None,
    config: PipelineConfig = PipelineConfig(),
    on_day: Callable[[DayOutcome, CentralState], None] | None = None,
) -> list[DayOutcome]:
    """Calibrate on the first ``window_days`` days, then run one cycle per remaining day."""
    days = substation_days(ms)
    if len(days) <= config.window_days:
        raise CalibrationIncomplete("measurements must cover calibration plus at least one monitoring day")
    buses = list(device_buses if device_buses is not None else ms.inverter_buses)
    state, _ = calibrate(days[: config.window_days], knowledge, config)
    outcomes = []
    for d in days[config.window_days:]:
        report, state = run_daily_cycle(state, d, knowledge, config)
        flags = device_flags(detectors, buses, d.day, ms.meter_series, config.detector_threshold)
        outcome = DayOutcome(report, flags, fuse(report.transformer_verdict, flags))
        log.info("day %d: %s / %s", d.day, report.transformer_verdict, outcome.fusion.kind)
        outcomes.append(outcome)
        if on_day is not None:
            on_day(outcome, state)
    return outcomes


def write_run_report(outcomes: Sequence[DayOutcome], path) -> None:
    with open(path, "w") as fh:
        for o in outcomes:
            fh.write(json.dumps(o.to_dict(), sort_keys=True) + "\n")


def summary_markdown(outcomes: Sequence[DayOutcome]) -> str:
    lines = [
        "| day | transformer | fusion | bus | flags | window |",
        "|---:|---|---|---:|---:|---:|",
    ]
    for o in outcomes:
        bus = "" if o.fusion.bus is None else str(o.fusion.bus)
        lines.append(
            f"| {o.report.day} | {o.report.transformer_verdict} | {o.fusion.kind} | {bus} "
            f"| {len(o.flags)} | {o.report.window_size_after} |"
        )
    return "\n".join(lines) + "\n"

"""Classification metrics and the transformer-level benchmark over reference grids."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn_core
from .feature_pipeline import DailySample
from .load_estimation import build_training_set, train_estimator
from .orchestrator import (
    GridKnowledge,
    PipelineConfig,
    RollingWindow,
    condense_measured,
    simulate_counterparts,
    substation_days,
)
from .presets import DEFAULT_IRRADIANCE, reference_scenario
from .scenario_sim import MalfunctionSchedule, run_scenario
from .svm_detector import predict_multiclass, train_multiclass

log = logging.getLogger(__name__)

CORRECT = "Correct"
WRONG = "Wrong"
INVERTED = "Inverted"
ABNORMAL = "Abnormal"


class LengthMismatch(ValueError):
    pass


class UnknownLabel(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    labels: tuple[str, ...]
    counts: np.ndarray  # truth along rows, prediction along columns

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def support(self) -> dict[str, int]:
        return {lab: int(n) for lab, n in zip(self.labels, self.counts.sum(axis=1))}


def confusion(predictions: Sequence[str], truths: Sequence[str], labels: Sequence[str]) -> ConfusionMatrix:
    if len(predictions) != len(truths):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(truths)} truths")
    if not predictions:
        raise LengthMismatch("nothing to evaluate")
    index = {lab: i for i, lab in enumerate(labels)}
    counts = np.zeros((len(labels), len(labels)), dtype=int)
    for p, t in zip(predictions, truths):
        if p not in index or t not in index:
            raise UnknownLabel(f"label outside {list(labels)}: {p if p not in index else t}")
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(tuple(labels), counts)


@dataclass(frozen=True)
class ClassScore:
    precision: float
    recall: float
    f: float
    support: int
    undefined: bool = False  # some ratio was 0/0 and reported as 0


def _ratio(num: float, den: float) -> tuple[float, bool]:
    return (num / den, False) if den else (0.0, True)


def harmonic_f(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def f_score(matrix: ConfusionMatrix, label: str) -> ClassScore:
    i = matrix.labels.index(label)
    tp = matrix.counts[i, i]
    precision, u1 = _ratio(tp, matrix.counts[:, i].sum())
    recall, u2 = _ratio(tp, matrix.counts[i, :].sum())
    f, u3 = _ratio(2 * precision * recall, precision + recall)
    return ClassScore(float(precision), float(recall), float(f), int(matrix.counts[i, :].sum()), u1 or u2 or u3)


@dataclass(frozen=True)
class MetricsReport:
    per_class: dict[str, ClassScore]
    macro_f: float
    matrix: ConfusionMatrix


def metrics_report(predictions: Sequence[str], truths: Sequence[str], labels: Sequence[str]) -> MetricsReport:
    m = confusion(predictions, truths, labels)
    per = {lab: f_score(m, lab) for lab in labels}
    return MetricsReport(per, float(np.mean([s.f for s in per.values()])), m)


# --- benchmark -------------------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkCase:
    name: str
    labels: tuple[str, ...]
    # evaluation days drawn per truth class (before relabelling)
    draws: tuple[tuple[str, int], ...]
    relabel: tuple[tuple[str, str], ...] = ()

    def map_label(self, label: str) -> str:
        return dict(self.relabel).get(label, label)


def table_cases(eval_days: int = 30) -> list[BenchmarkCase]:
    """The four class configurations of the reference results table, each with ``eval_days`` balanced days."""
    half, third = eval_days // 2, eval_days // 3
    return [
        BenchmarkCase("correct vs. wrong", (CORRECT, WRONG), ((CORRECT, half), (WRONG, eval_days - half))),
        BenchmarkCase("correct vs. inversed", (CORRECT, INVERTED), ((CORRECT, half), (INVERTED, eval_days - half))),
        BenchmarkCase(
            "correct vs. wrong vs. inversed", (CORRECT, WRONG, INVERTED),
            ((CORRECT, third), (WRONG, third), (INVERTED, eval_days - 2 * third)),
        ),
        BenchmarkCase(
            "correct vs. abnormal", (CORRECT, ABNORMAL),
            ((CORRECT, half), (WRONG, (eval_days - half + 1) // 2), (INVERTED, (eval_days - half) // 2)),
            relabel=((WRONG, ABNORMAL), (INVERTED, ABNORMAL)),
        ),
    ]


@dataclass(frozen=True)
class BenchmarkConfig:
    setups: tuple[str, ...] = ("A", "B")
    eval_days: int = 30
    calibration_seed: int = 11
    evaluation_seed: int = 23
    estimator_seed: int = 5
    estimator_samples: int = 1000
    estimator_train: nn_core.TrainConfig = field(default_factory=nn_core.TrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    highres_step_s: int = 60
    # day index ranges kept apart so evaluation never reuses calibration draws
    evaluation_day_offset: int = 1000

    def manifest(self) -> dict:
        return {
            "setups": list(self.setups),
            "eval_days": self.eval_days,
            "calibration_seed": self.calibration_seed,
            "evaluation_seed": self.evaluation_seed,
            "estimator_seed": self.estimator_seed,
            "estimator_samples": self.estimator_samples,
            "highres_step_s": self.highres_step_s,
            "evaluation_day_offset": self.evaluation_day_offset,
            "window_days": self.pipeline.window_days,
            "svm": {"kernel": self.pipeline.kernel.to_dict(), "C": self.pipeline.C},
        }


@dataclass
class CellResult:
    setup: str
    case: str
    report: MetricsReport
    calibration_days: list[int]
    evaluation_days: list[int]


def _evaluation_pool(setup: str, cfg: BenchmarkConfig, counts: dict[str, int]) -> dict[str, list[DailySample]]:
    pool = {}
    for k, cls in enumerate((CORRECT, WRONG, INVERTED)):
        n = counts.get(cls, 0)
        if n == 0:
            continue
        first = cfg.evaluation_day_offset * (k + 1)
        scen = reference_scenario(setup, n, cfg.evaluation_seed, first_day=first, highres_step_s=cfg.highres_step_s)
        if cls != CORRECT:
            scen = replace(scen, schedule=MalfunctionSchedule(scen.inverters[0].bus, cls, first))
        ms = run_scenario(scen)
        pool[cls] = [condense_measured(d, cls) for d in substation_days(ms)]
    return pool


def benchmark_setup(setup: str, cfg: BenchmarkConfig, cases: Sequence[BenchmarkCase]) -> list[CellResult]:
    pipe = cfg.pipeline
    cal_scen = reference_scenario(setup, pipe.window_days, cfg.calibration_seed, highres_step_s=cfg.highres_step_s)
    topo, inverters = cal_scen.topology, cal_scen.inverters
    training_set = build_training_set(
        topo, inverters, cfg.estimator_samples, rng_seed=cfg.estimator_seed, irradiance=DEFAULT_IRRADIANCE,
    )
    estimator = train_estimator(training_set, replace(cfg.estimator_train, seed=cfg.estimator_seed))
    cal = run_scenario(cal_scen)
    knowledge = GridKnowledge(topo, inverters, estimator, cal.channel_names, cal.highres_step_s)
    window = RollingWindow(pipe.window_days)
    for d in substation_days(cal):
        window.add(condense_measured(d), simulate_counterparts(knowledge, d, pipe).samples)
    calibration = window.training_samples()

    need: dict[str, int] = {}
    for case in cases:
        for cls, n in case.draws:
            need[cls] = max(need.get(cls, 0), n)
    pool = _evaluation_pool(setup, cfg, need)

    results = []
    for case in cases:
        base_labels = {cls for cls, _ in case.draws}
        train = [s.relabeled(case.map_label(s.label)) for s in calibration if s.label in base_labels]
        svm = train_multiclass(train, pipe.kernel, pipe.C, seed=pipe.svm_seed)
        evaluation = [s for cls, n in case.draws for s in pool[cls][:n]]
        truths = [case.map_label(s.label) for s in evaluation]
        preds = predict_multiclass(svm, np.stack([s.features for s in evaluation]))
        cal_days = sorted({s.day for s in train})
        eval_days = sorted({s.day for s in evaluation})
        if set(cal_days) & set(eval_days):
            raise AssertionError("evaluation days overlap calibration days")
        rep = metrics_report(preds, truths, case.labels)
        log.info("%s / %s: macro-F %.3f", setup, case.name, rep.macro_f)
        results.append(CellResult(setup, case.name, rep, cal_days, eval_days))
    return results


def run_benchmark(
    cfg: BenchmarkConfig = BenchmarkConfig(),
    cases: Sequence[BenchmarkCase] | None = None,
    out_dir=None,
) -> list[CellResult]:
    if cfg.eval_days < 1:
        raise ValueError("benchmark needs at least one evaluation day per case")
    cases = list(cases) if cases is not None else table_cases(cfg.eval_days)
    results = []
    for setup in cfg.setups:
        results += benchmark_setup(setup, cfg, cases)
    if out_dir is not None:
        write_benchmark(results, cfg, out_dir)
    return results


def write_benchmark(results: Sequence[CellResult], cfg: BenchmarkConfig, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "results.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["setup", "case", "class", "precision", "recall", "f", "support", "macro_f"])
        for r in results:
            for lab, s in r.report.per_class.items():
                w.writerow([r.setup, r.case, lab, f"{s.precision:.6f}", f"{s.recall:.6f}",
                            f"{s.f:.6f}", s.support, f"{r.report.macro_f:.6f}"])
    md_path = out / "results.md"
    md_path.write_text(benchmark_markdown(results))
    manifest_path = out / "seed_manifest.json"
    manifest_path.write_text(json.dumps(cfg.manifest(), indent=2, sort_keys=True) + "\n")
    return [csv_path, md_path, manifest_path]


def benchmark_markdown(results: Sequence[CellResult]) -> str:
    setups = list(dict.fromkeys(r.setup for r in results))
    cases = list(dict.fromkeys(r.case for r in results))
    cell = {(r.setup, r.case): r.report.macro_f for r in results}
    lines = [
        "| F-score (macro) | " + " | ".join(f"Grid setup {s} (sim)" for s in setups) + " |",
        "|---|" + "---:|" * len(setups),
    ]
    for case in cases:
        vals = [f"{cell[(s, case)]:.2f}" if (s, case) in cell else "*" for s in setups]
        lines.append(f"| {case} | " + " | ".join(vals) + " |")
    return "\n".join(lines) + "\n"

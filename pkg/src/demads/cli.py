"""Command-line entry point: ``demads <command> [options]``.

Exit codes: 0 success, 1 unexpected failure, 2 usage, 3 unreadable or invalid
input, 4 power-flow non-convergence, 5 fingerprint or channel mismatch.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import zlib
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import nn_core
from .eval_harness import BenchmarkConfig, metrics_report, run_benchmark
from .grid_model import NonConvergence, random_radial_topology, validate_topology
from .load_estimation import (
    FingerprintMismatch,
    SpecMismatch,
    build_training_set,
    load_estimator,
    save_estimator,
    train_estimator,
)
from .orchestrator import (
    GridKnowledge,
    PipelineConfig,
    monitor_period,
    summary_markdown,
    write_run_report,
)
from .presets import DEFAULT_IRRADIANCE, GRID_SPECS, grid_setup, pv_inverters, reference_scenario
from .rt_detector import RtConfig, build_device_windows, init_rt_model, load_rt_model, pretrain, save_rt_model
from .scenario_sim import (
    IrradianceModel,
    MalfunctionSchedule,
    grid_to_dict,
    load_grid_file,
    read_measurements,
    run_scenario,
    scenario_from_dict,
    write_measurements,
)

log = logging.getLogger("demads")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_CONVERGENCE = 4
EXIT_FINGERPRINT = 5


class UsageError(Exception):
    pass


def derive_seed(seed: int, stream: str) -> int:
    """Independent 32-bit seed for a named stream of the global seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(stream.encode())]).generate_state(1)[0])


def _read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _write_json(data, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _grid(ref: str):
    """A grid file path, or ``preset:<name>`` for a built-in reference grid."""
    if ref.startswith("preset:"):
        return grid_setup(ref.split(":", 1)[1])
    return load_grid_file(ref)


def load_scenario(data: dict, base_dir: Path):
    """Scenario file contents; ``{"preset": name, ...}`` uses a reference grid with its households."""
    if "preset" not in data:
        return scenario_from_dict(data, base_dir)
    sched = data.get("schedule")
    return reference_scenario(
        data["preset"], int(data.get("days", 1)), int(data.get("seed", 0)),
        first_day=int(data.get("first_day", 0)),
        schedule=MalfunctionSchedule(**sched) if sched else None,
        highres_step_s=int(data.get("highres_step_s", 60)),
    )


# --- commands ----------------------------------------------------------------------

def cmd_gen_grid(args) -> int:
    out = Path(args.out or "grid.json")
    if args.preset:
        topo, inverters = grid_setup(args.preset)
    else:
        if args.buses < 2:
            raise UsageError("--buses must be at least 2")
        if args.feeders < 1:
            raise UsageError("--feeders must be at least 1")
        topo = random_radial_topology(args.buses, args.feeders, args.seed)
        inverters = pv_inverters(topo, min(args.pv, topo.bus_count - 1), args.seed)
    validate_topology(topo)
    _write_json(grid_to_dict(topo, inverters), out)
    print(out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    if not args.config:
        raise UsageError("simulate needs --config <scenario.json>")
    path = Path(args.config)
    config = load_scenario(_read_json(path), path.parent)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    ms = run_scenario(config)
    out = Path(args.out or "measurements")
    paths = write_measurements(ms, out)
    print(f"{out}  {len(ms.days)} days, {len(paths)} files")
    return EXIT_OK


def cmd_train_estimator(args) -> int:
    cfg = _read_json(args.config) if args.config else {}
    grid_ref = args.grid or cfg.get("grid")
    if not grid_ref:
        raise UsageError("train-estimator needs --grid or a config with a 'grid' entry")
    topo, inverters = _grid(grid_ref)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    irradiance = IrradianceModel(**cfg["irradiance"]) if "irradiance" in cfg else DEFAULT_IRRADIANCE
    training_set = build_training_set(
        topo, inverters, int(cfg.get("samples", 1000)),
        load_range_kw=tuple(cfg.get("load_range_kw", (0.0, 4.0))),
        rng_seed=derive_seed(seed, "estimator-data"), irradiance=irradiance,
    )
    train_cfg = nn_core.TrainConfig(
        optimizer=cfg.get("optimizer", "adam"), lr=float(cfg.get("lr", 1e-3)), epochs=int(cfg.get("epochs", 200)),
        batch_size=int(cfg.get("batch_size", 32)), loss="mse", seed=derive_seed(seed, "estimator-train"),
    )
    est = train_estimator(training_set, train_cfg, hidden=tuple(cfg.get("hidden", (32, 32))))
    out = Path(args.out or "estimator.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_estimator(est, out)
    print(f"{out}  holdout MAE {est.holdout_mae.mean():.4f} kW, baseline {est.baseline_mae.mean():.4f} kW")
    return EXIT_OK


def cmd_pretrain_detector(args) -> int:
    cfg = _read_json(args.config) if args.config else {}
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    use_case = cfg.get("use_case", "Inverted")
    days = int(cfg.get("days", 30))
    windows = []
    for k, ref in enumerate(cfg.get("grids", ["D0", "D1", "D2"])):
        if ref in GRID_SPECS:
            scen = reference_scenario(ref, days, derive_seed(seed, f"detector-grid{k}"))
        else:
            path = Path(ref) if not args.config else Path(args.config).parent / ref
            scen = load_scenario(_read_json(path), path.parent)
        windows += build_device_windows(scen, use_case)
    rt = RtConfig(**cfg.get("model", {}))
    model = init_rt_model(rt, seed=derive_seed(seed, "detector-init"), use_case=use_case)
    train_cfg = nn_core.TrainConfig(
        optimizer="adam", lr=float(cfg.get("lr", 3e-3)), epochs=int(cfg.get("epochs", 40)),
        batch_size=int(cfg.get("batch_size", 32)), loss="cross_entropy", seed=derive_seed(seed, "detector-train"),
    )
    model, history = pretrain(model, windows, train_cfg)
    out = Path(args.out or f"detector_{use_case.lower()}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_rt_model(model, out)
    print(f"{out}  {len(windows)} windows, final loss {history[-1]:.4f}")
    return EXIT_OK


def _pipeline_config(cfg: dict) -> PipelineConfig:
    keys = ("window_days", "C", "svm_seed", "exclude_suspect_days", "detector_threshold", "balance_iterations")
    kw = {k: cfg[k] for k in keys if k in cfg}
    if "malfunction_classes" in cfg:
        kw["malfunction_classes"] = tuple(cfg["malfunction_classes"])
    return PipelineConfig(**kw)


def cmd_monitor(args) -> int:
    cfg = _read_json(args.config) if args.config else {}
    measurements = args.measurements or cfg.get("measurements")
    grid_ref = args.grid or cfg.get("grid")
    estimator_path = args.estimator or cfg.get("estimator")
    if not (measurements and grid_ref and estimator_path):
        raise UsageError("monitor needs --measurements, --grid and --estimator")
    topo, inverters = _grid(grid_ref)
    topo = validate_topology(topo)
    estimator = load_estimator(estimator_path, topo)
    ms = read_measurements(measurements)
    detectors = [load_rt_model(p) for p in (args.detector or cfg.get("detectors", []))]
    knowledge = GridKnowledge(topo, inverters, estimator, ms.channel_names, ms.highres_step_s)
    outcomes = monitor_period(ms, knowledge, detectors, config=_pipeline_config(cfg.get("pipeline", {})))
    out = Path(args.out or "monitor")
    out.mkdir(parents=True, exist_ok=True)
    write_run_report(outcomes, out / "report.jsonl")
    summary = summary_markdown(outcomes)
    (out / "summary.md").write_text(summary)
    if args.format == "json":
        print(json.dumps([o.to_dict() for o in outcomes], sort_keys=True))
    else:
        print(summary, end="")
    return EXIT_OK


def benchmark_config(cfg: dict, seed: int | None) -> BenchmarkConfig:
    base = BenchmarkConfig()
    kw = {}
    for key in ("eval_days", "calibration_seed", "evaluation_seed", "estimator_seed",
                "estimator_samples", "highres_step_s", "evaluation_day_offset"):
        if key in cfg:
            kw[key] = int(cfg[key])
    if "setups" in cfg:
        kw["setups"] = tuple(cfg["setups"])
    if seed is not None:
        for stream in ("calibration_seed", "evaluation_seed", "estimator_seed"):
            kw[stream] = derive_seed(seed, stream)
    if "estimator_epochs" in cfg:
        kw["estimator_train"] = replace(base.estimator_train, epochs=int(cfg["estimator_epochs"]))
    if "pipeline" in cfg:
        kw["pipeline"] = _pipeline_config(cfg["pipeline"])
    return replace(base, **kw)


def cmd_benchmark(args) -> int:
    cfg = benchmark_config(_read_json(args.config) if args.config else {}, args.seed)
    out = Path(args.out or "benchmark")
    results = run_benchmark(cfg, out_dir=out)
    if args.format == "md":
        print((out / "results.md").read_text(), end="")
    elif args.format == "json":
        print(json.dumps({f"{r.setup}/{r.case}": r.report.macro_f for r in results}, indent=2))
    else:
        print((out / "results.csv").read_text(), end="")
    return EXIT_OK


def _format_metrics(report, fmt: str) -> str:
    rows = [(lab, s.precision, s.recall, s.f, s.support) for lab, s in report.per_class.items()]
    if fmt == "json":
        data = {
            "macro_f": report.macro_f,
            "labels": list(report.matrix.labels),
            "confusion": report.matrix.counts.tolist(),
            "per_class": {lab: {"precision": p, "recall": r, "f": f, "support": n} for lab, p, r, f, n in rows},
        }
        return json.dumps(data, indent=2, sort_keys=True) + "\n"
    if fmt == "md":
        lines = ["| class | precision | recall | F | support |", "|---|---:|---:|---:|---:|"]
        lines += [f"| {lab} | {p:.3f} | {r:.3f} | {f:.3f} | {n} |" for lab, p, r, f, n in rows]
        lines.append(f"\nmacro-F: {report.macro_f:.3f}")
        return "\n".join(lines) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "precision", "recall", "f", "support"])
    w.writerows([[lab, f"{p:.6f}", f"{r:.6f}", f"{f:.6f}", n] for lab, p, r, f, n in rows])
    w.writerow(["macro", "", "", f"{report.macro_f:.6f}", sum(n for *_, n in rows)])
    return buf.getvalue()


def cmd_evaluate(args) -> int:
    """Score a monitor report's transformer verdicts against the simulated day labels."""
    if not (args.report and args.measurements):
        raise UsageError("evaluate needs --report and --measurements")
    meta = _read_json(Path(args.measurements) / "metadata.json")
    truth = dict(zip(meta["days"], meta["labels"]))
    preds, truths = [], []
    with open(args.report) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                preds.append(rec["transformer_verdict"])
                truths.append(truth[rec["day"]])
    labels = sorted(set(preds) | set(truths), key=lambda s: (s != "Correct", s))
    text = _format_metrics(metrics_report(preds, truths, labels), args.format or "csv")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    print(text, end="")
    return EXIT_OK


# --- plumbing --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="demads", description="PV control-curve malfunction detection toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file for the command")
    common.add_argument("--seed", type=int, default=None, help="global seed; named substreams are derived from it")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--format", choices=("csv", "md", "json"), default=None, help="format of standard output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-grid", parents=[common], help="write a random radial grid with PV units")
    p.add_argument("--buses", type=int, default=8)
    p.add_argument("--feeders", type=int, default=2)
    p.add_argument("--pv", type=int, default=1, help="number of PV inverters")
    p.add_argument("--preset", choices=sorted(GRID_SPECS), help="write a built-in reference grid instead")
    p.set_defaults(func=cmd_gen_grid, seed_default=0)

    p = sub.add_parser("simulate", parents=[common], help="simulate a scenario file into measurement CSVs")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train-estimator", parents=[common], help="train the load estimator for one grid")
    p.add_argument("--grid", help="grid JSON file or preset:<name>")
    p.set_defaults(func=cmd_train_estimator)

    p = sub.add_parser("pretrain-detector", parents=[common], help="pre-train a device-level detector")
    p.set_defaults(func=cmd_pretrain_detector)

    p = sub.add_parser("monitor", parents=[common], help="run the daily monitoring protocol")
    p.add_argument("--measurements", help="directory written by simulate")
    p.add_argument("--grid", help="grid JSON file or preset:<name>")
    p.add_argument("--estimator", help="load estimator model file")
    p.add_argument("--detector", action="append", help="device detector model file (repeatable)")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("benchmark", parents=[common], help="transformer-level benchmark over grid setups A and B")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("evaluate", parents=[common], help="metrics of a monitor report against day labels")
    p.add_argument("--report", help="report.jsonl written by monitor")
    p.add_argument("--measurements", help="directory holding the matching metadata.json")
    p.set_defaults(func=cmd_evaluate)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("DEMADS_LOG", "error").upper()
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.seed is None and getattr(args, "seed_default", None) is not None:
        args.seed = args.seed_default
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonConvergence as exc:
        print(f"power flow did not converge: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (FingerprintMismatch, SpecMismatch) as exc:
        print(f"fingerprint mismatch: {exc}", file=sys.stderr)
        return EXIT_FINGERPRINT
    except FileNotFoundError as exc:
        print(f"file not found: {exc.filename}", file=sys.stderr)
        return EXIT_PARSE
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``phasezoo [--zoo PATH] [--config FILE] <group> <command>``.

Every command prints a human-readable line followed by a one-line JSON
summary. Exit codes: 0 success, 1 contract violation, 2 invalid config,
3 incomplete or missing zoo.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import sys
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .data import DatasetSpec
from .downstream import DEFAULT_OPTIONS, METHODS, downstream_grid
from .hpo import run_hpo_experiment
from .metrics import MetricOptions, compute_metrics
from .nn import ModelSpec
from .phase import (CoverageError, PhaseLabel, PhaseThresholds, classify, fit_thresholds, phase_grid,
                    provisional_thresholds, records_from_manifest)
from .probe import DEFAULT_LAMBDAS, TARGETS, SampleSizeError, export_features_csv, run_probe
from .trainer import TrainConfig
from .zoo import (METRIC_FIELDS, RUN_FIELDS, GridSpec, IncompleteZooError, ZooManifest, collect_grid,
                  export_grid_csv, plan_grid, read_json, run_grid, write_json)

EXIT_OK, EXIT_CONTRACT, EXIT_CONFIG, EXIT_INCOMPLETE = 0, 1, 2, 3
GRID_EXPORT_FIELDS = ("train_loss", "test_acc", "ggap", "lambda_max", "trace", "mc", "cka")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class IncompleteError(RuntimeError):
    def __init__(self, message: str, cells: list[str] | None = None):
        super().__init__(message)
        self.cells = cells or []


# ---------------------------------------------------------------------------
# configuration

DESK_GRID = {
    "widths": [4, 8, 16, 32, 64],
    "batch_sizes": [2, 4, 8, 16, 32],
    "seeds": [0, 1, 2],
    "pairwise": True,
    "model": {"input_dim": 2, "num_hidden_layers": 2, "output_dim": 3, "activation": "relu"},
    "train": {"epochs": 40, "peak_lr": 0.05},
    "dataset": {"generator": "spirals", "n_train": 256, "n_test": 300, "classes": 3, "noise": 0.2},
}

SECTIONS = {
    "zoo": None, "workers": None, "seed": None,
    "grid": {"widths", "batch_sizes", "seeds", "pairwise", "model", "train", "dataset"},
    "metrics": {f.name for f in dataclasses.fields(MetricOptions)},
    "phase": {"labels", "level", "bounds"},
    "hpo": {"trials", "paired"},
    "downstream": set(METHODS),
    "probe": {"target", "train_fraction", "lambda_grid", "split_seed"},
}


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(section: Any, allowed: set[str], path: str) -> dict:
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise ConfigError(path, "expected an object")
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
    return section


def _build(path: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(path, str(exc)) from exc


def parse_grid(section: dict) -> GridSpec:
    section = _check_keys(section, SECTIONS["grid"], "grid")
    merged = {**DESK_GRID, **section}
    model = _check_keys(merged["model"], _fields(ModelSpec) - {"hidden_width", "seed"}, "grid.model")
    train = _check_keys(merged["train"], _fields(TrainConfig) - {"batch_size", "seed"}, "grid.train")
    dataset = _check_keys(merged["dataset"], _fields(DatasetSpec), "grid.dataset")
    first_width = merged["widths"][0] if merged["widths"] else 1
    base_spec = _build("grid.model", ModelSpec, hidden_width=first_width, **model)
    first_batch = merged["batch_sizes"][0] if merged["batch_sizes"] else 1
    base_config = _build("grid.train", TrainConfig, batch_size=first_batch, **train)
    dataset_spec = _build("grid.dataset", DatasetSpec, **dataset)
    for key in ("widths", "batch_sizes", "seeds"):
        if not isinstance(merged[key], list) or not all(isinstance(v, int) for v in merged[key]):
            raise ConfigError(f"grid.{key}", "expected a list of integers")
    if dataset_spec.n_train < max(merged["batch_sizes"] or [1]):
        raise ConfigError("grid.batch_sizes", "batch size exceeds the training set size")
    return _build("grid", GridSpec, tuple(merged["widths"]), tuple(merged["batch_sizes"]), tuple(merged["seeds"]),
                  base_spec, base_config, dataset_spec, bool(merged["pairwise"]))


@dataclasses.dataclass
class PipelineConfig:
    zoo: str | None = None
    workers: int = 1
    seed: int = 0
    grid: dict = dataclasses.field(default_factory=dict)
    metrics: dict = dataclasses.field(default_factory=dict)
    phase: dict = dataclasses.field(default_factory=dict)
    hpo: dict = dataclasses.field(default_factory=dict)
    downstream: dict = dataclasses.field(default_factory=dict)
    probe: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        _check_keys(d, set(SECTIONS), "")
        cfg = cls(**{k: v for k, v in d.items()})
        for name, allowed in SECTIONS.items():
            if allowed is not None:
                _check_keys(getattr(cfg, name), allowed, name)
        for method, opts in cfg.downstream.items():
            _check_keys(opts, set(DEFAULT_OPTIONS[method]), f"downstream.{method}")
        _build("metrics", MetricOptions.from_dict, cfg.metrics)
        if cfg.probe.get("target", "test_acc") not in TARGETS:
            raise ConfigError("probe.target", f"must be one of {', '.join(TARGETS)}")
        for key in ("workers", "seed"):
            if not isinstance(getattr(cfg, key), int) or getattr(cfg, key) < (1 if key == "workers" else 0):
                raise ConfigError(key, "expected a nonnegative integer" if key == "seed" else "expected an integer >= 1")
        for cell, token in (cfg.phase.get("labels") or {}).items():
            _build(f"phase.labels.{cell}", PhaseLabel.parse, token)
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path: str | None) -> tuple[PipelineConfig, dict]:
    if path is None:
        return PipelineConfig(), {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError("--config", str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"not valid JSON ({exc})") from exc
    return PipelineConfig.from_dict(raw), {str(Path(path)): _sha256(Path(path))}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# helpers


def _zoo_root(args, cfg: PipelineConfig) -> Path:
    root = args.zoo or cfg.zoo
    if root is None:
        raise ConfigError("zoo", "no zoo root given (use --zoo or the config's 'zoo' key)")
    return Path(root)


def _load_manifest(root: Path) -> ZooManifest:
    if not (root / "manifest.json").exists():
        raise IncompleteError(f"no zoo at {root} (run 'zoo plan' first)")
    return ZooManifest.load(root)


def _require_complete(manifest: ZooManifest) -> None:
    try:
        manifest.require_complete()
    except IncompleteZooError as exc:
        raise IncompleteError(str(exc), exc.cells) from exc


def _thresholds(root: Path) -> PhaseThresholds:
    path = root / "phase_thresholds.json"
    if not path.exists():
        raise IncompleteError("no phase_thresholds.json (run 'phase fit' first)")
    return PhaseThresholds.load(path)


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def _write_provenance(root: Path, command: str, cfg: PipelineConfig, args: argparse.Namespace, inputs: dict) -> None:
    path = root / "provenance.json"
    prov = read_json(path) if path.exists() else {"commands": {}}
    resolved = {k: v for k, v in vars(args).items() if k not in ("handler", "config")}
    prov["tool"] = {"name": "phasezoo", "version": __version__}
    prov["commands"][command] = {"config": cfg.to_dict(), "arguments": _jsonable(resolved), "inputs": inputs}
    write_json(path, prov)


# ---------------------------------------------------------------------------
# commands; each returns (human line, summary dict)


def cmd_zoo_plan(args, cfg, root):
    grid = parse_grid(cfg.grid)
    cells = plan_grid(grid)
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        existing = read_json(manifest_path)["grid"]
        if existing != grid.to_dict():
            raise ConfigError("grid", f"{root} already holds a zoo planned with a different grid")
        manifest = ZooManifest.load(root)
    else:
        manifest = ZooManifest.create(root, grid)
    done = sum(1 for e in manifest.cells.values() if e.status != "pending")
    return f"{len(cells)} cells planned", {"cells": len(cells), "already_complete": done}


def cmd_zoo_run(args, cfg, root):
    manifest = _load_manifest(root)
    run_grid(manifest, workers=args.workers or cfg.workers, limit=args.limit)
    statuses = [e.status for e in manifest.cells.values()]
    counts = {s: statuses.count(s) for s in ("done", "diverged", "pending")}
    errors = {k: e.error for k, e in manifest.cells.items() if e.error}
    return (f"{counts['done']} done, {counts['diverged']} diverged, {counts['pending']} pending",
            {**counts, "errors": errors})


def cmd_metrics_compute(args, cfg, root):
    manifest = _load_manifest(root)
    _require_complete(manifest)
    opts = {**cfg.metrics}
    if args.seed is not None:
        opts["seed"] = args.seed
    options = _build("metrics", MetricOptions.from_dict, opts)
    compute_metrics(manifest, options, workers=args.workers or cfg.workers, overwrite=args.overwrite)
    annotated = sum(1 for e in manifest.cells.values() if e.metrics is not None)
    return f"{annotated} models annotated", {"annotated": annotated, "options": options.to_dict()}


def cmd_phase_fit(args, cfg, root):
    manifest = _load_manifest(root)
    _require_complete(manifest)
    level = cfg.phase.get("level", "config")
    records = records_from_manifest(manifest, level)
    if not records:
        raise IncompleteError("no cells carry metrics (run 'metrics compute' first)")
    labels_map = cfg.phase.get("labels")
    if args.labels:
        labels_map = read_json(Path(args.labels))
    provisional = not labels_map
    if provisional:
        start = provisional_thresholds(records)
        labels = [classify(r, start) for r in records]
        usable = records
    else:
        by_cell = {k: PhaseLabel.parse(v) for k, v in labels_map.items()}
        usable = [r for r in records if r.cell in by_cell]
        labels = [by_cell[r.cell] for r in usable]
    bounds = {k: tuple(v) for k, v in (cfg.phase.get("bounds") or {}).items()}
    try:
        fitted = fit_thresholds(usable, labels, bounds=bounds)
    except CoverageError as exc:
        if not provisional:
            raise
        # the bootstrap labels are self-consistent; keep its thresholds unrefined
        start.save(root / "phase_thresholds.json")
        return (f"provisional thresholds kept unrefined; bootstrap labels miss {', '.join(p.token for p in exc.missing)}",
                {**start.to_dict(), "missing_phases": [p.token for p in exc.missing]})
    fitted.provisional = provisional
    fitted.save(root / "phase_thresholds.json")
    return (f"thresholds fitted on {len(usable)} records, accuracy {fitted.accuracy:.3f}"
            + (" (provisional labels)" if provisional else ""), fitted.to_dict())


def cmd_phase_classify(args, cfg, root):
    manifest = _load_manifest(root)
    _require_complete(manifest)
    result = phase_grid(manifest, _thresholds(root))
    (root / "grids").mkdir(exist_ok=True)
    out = export_grid_csv(result.table, root / "grids" / "phase.csv")
    tokens = [v for v in result.table.values.ravel() if v is not None]
    counts = {p.token: tokens.count(p.token) for p in PhaseLabel}
    return (f"{len({t for t in tokens})} distinct phases over {len(tokens)} cells",
            {"counts": counts, "unlabeled": result.unlabeled, "csv": str(out)})


def cmd_hpo_run(args, cfg, root):
    manifest = _load_manifest(root)
    _require_complete(manifest)
    trials = args.trials or cfg.hpo.get("trials", 50)
    paired = not args.unpaired and cfg.hpo.get("paired", True)
    seed = args.seed if args.seed is not None else cfg.seed
    rand, aware = run_hpo_experiment(manifest, _thresholds(root), trials=trials, seed=seed, paired=paired)
    return (f"random {rand.mean_gain:+.4f} +/- {rand.std_gain:.4f}, "
            f"phase-aware {aware.mean_gain:+.4f} +/- {aware.std_gain:.4f}",
            {"random": {"mean_gain": rand.mean_gain, "std_gain": rand.std_gain, "trials": rand.trials},
             "phase_aware": {"mean_gain": aware.mean_gain, "std_gain": aware.std_gain, "trials": aware.trials}})


def _parse_option(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError("--option", f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def cmd_downstream(args, cfg, root):
    manifest = _load_manifest(root)
    _require_complete(manifest)
    opts = dict(cfg.downstream.get(args.method, {}))
    opts.update(dict(_parse_option(o) for o in args.option or []))
    _check_keys(opts, set(DEFAULT_OPTIONS[args.method]), f"downstream.{args.method}")
    table = downstream_grid(manifest, args.method, opts, workers=args.workers or cfg.workers)
    out = export_grid_csv(table, root / "downstream" / f"{args.method}.csv")
    missing = int(np.isnan(table.values).sum())
    return f"{args.method}: {table.values.size - missing} cells evaluated, {missing} failed", {"csv": str(out)}


def cmd_probe_run(args, cfg, root):
    manifest = _load_manifest(root)
    _require_complete(manifest)
    target = args.target or cfg.probe.get("target", "test_acc")
    split_seed = args.seed if args.seed is not None else cfg.probe.get("split_seed", cfg.seed)
    report = run_probe(manifest, target, split_seed=split_seed,
                       train_fraction=cfg.probe.get("train_fraction", 0.8),
                       lambda_grid=tuple(cfg.probe.get("lambda_grid", DEFAULT_LAMBDAS)),
                       permutation_seed=args.permute_seed)
    if args.features_csv:
        export_features_csv(manifest, args.features_csv)
    return f"{target}: held-out R^2 {report.r2_test:.4f} (lambda {report.ridge_lambda:g})", _jsonable(report.to_dict())


def cmd_export_grid(args, cfg, root):
    manifest = _load_manifest(root)
    _require_complete(manifest)
    fields = list(GRID_EXPORT_FIELDS) if args.all else [args.field]
    for f in fields:
        if f not in RUN_FIELDS and f not in METRIC_FIELDS:
            raise ConfigError("--field", f"unknown field {f!r}")
    out_dir = root / "grids"
    out_dir.mkdir(exist_ok=True)
    written = [str(export_grid_csv(collect_grid(manifest, f), out_dir / f"{f}.csv")) for f in fields]
    return f"{len(written)} grid CSV(s) written", {"files": written}


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phasezoo", description="Model-zoo phase analysis pipeline.")
    parser.add_argument("--zoo", help="zoo root directory")
    parser.add_argument("--config", help="pipeline config (JSON)")
    parser.add_argument("--seed", type=int, default=None, help="seed for stochastic analysis steps")
    parser.add_argument("--workers", type=int, default=None, help="worker processes")
    groups = parser.add_subparsers(dest="group", required=True)

    zoo = groups.add_parser("zoo").add_subparsers(dest="command", required=True)
    zoo.add_parser("plan").set_defaults(handler=cmd_zoo_plan)
    p = zoo.add_parser("run")
    p.add_argument("--limit", type=int, default=None, help="train at most this many cells")
    p.set_defaults(handler=cmd_zoo_run)

    metrics = groups.add_parser("metrics").add_subparsers(dest="command", required=True)
    p = metrics.add_parser("compute")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(handler=cmd_metrics_compute)

    phase = groups.add_parser("phase").add_subparsers(dest="command", required=True)
    p = phase.add_parser("fit")
    p.add_argument("--labels", help="JSON mapping w<W>_bs<B> to a phase token")
    p.set_defaults(handler=cmd_phase_fit)
    phase.add_parser("classify").set_defaults(handler=cmd_phase_classify)

    hpo = groups.add_parser("hpo").add_subparsers(dest="command", required=True)
    p = hpo.add_parser("run")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--unpaired", action="store_true", help="draw separate start cells per policy")
    p.set_defaults(handler=cmd_hpo_run)

    p = groups.add_parser("downstream")
    p.add_argument("method", choices=METHODS)
    p.add_argument("--option", action="append", metavar="KEY=VALUE")
    p.set_defaults(handler=cmd_downstream, command=None)

    probe = groups.add_parser("probe").add_subparsers(dest="command", required=True)
    p = probe.add_parser("run")
    p.add_argument("--target", choices=TARGETS, default=None)
    p.add_argument("--permute-seed", type=int, default=None, help="shuffle targets (permutation control)")
    p.add_argument("--features-csv", default=None)
    p.set_defaults(handler=cmd_probe_run)

    export = groups.add_parser("export").add_subparsers(dest="command", required=True)
    p = export.add_parser("grid")
    sel = p.add_mutually_exclusive_group(required=True)
    sel.add_argument("--field")
    sel.add_argument("--all", action="store_true", help="write all seven standard grids")
    p.set_defaults(handler=cmd_export_grid)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    command = " ".join(c for c in (args.group, args.command) if c)
    if args.group == "downstream":
        command = f"downstream {args.method}"
    summary: dict = {"command": command}
    try:
        cfg, inputs = load_config(args.config)
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers", "must be >= 1")
        root = _zoo_root(args, cfg)
        manifest_path = root / "manifest.json"
        if manifest_path.exists():
            inputs = {**inputs, "manifest.json": _sha256(manifest_path)}
        message, details = args.handler(args, cfg, root)
        _write_provenance(root, command, cfg, args, inputs)
        code = EXIT_OK
        summary.update(status="ok", **_jsonable(details))
    except ConfigError as exc:
        message, code = f"invalid config: {exc}", EXIT_CONFIG
        summary.update(status="invalid_config", key=exc.path, error=str(exc))
    except IncompleteError as exc:
        shown = ", ".join(exc.cells[:10]) + (" ..." if len(exc.cells) > 10 else "")
        message = f"incomplete zoo: {exc}" + (f" [{shown}]" if exc.cells else "")
        code = EXIT_INCOMPLETE
        summary.update(status="incomplete", error=str(exc), cells=exc.cells)
    except (CoverageError, SampleSizeError) as exc:
        message, code = f"error: {exc}", EXIT_CONTRACT
        summary.update(status="error", error=str(exc))
    print(message)
    print(json.dumps(summary, sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())

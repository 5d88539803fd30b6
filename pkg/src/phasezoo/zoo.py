"""Load x temperature x seed grids of trained models, persisted one folder per model.

Directory contract under a zoo root::

    manifest.json
    w<width>_bs<batch>_s<seed>/
        config.json      model spec + train config + dataset recipe
        results.json     full epoch history (written last; marks the cell complete)
        metrics.json     loss-landscape metrics, once computed
        checkpoints/epoch_<N>/model.bin, layout.json
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetSpec
from .nn import ModelSpec, ParameterVector
from .trainer import EpochRecord, TrainConfig, train

log = logging.getLogger(__name__)

STATUSES = ("pending", "done", "diverged")
RUN_FIELDS = ("train_loss", "train_acc", "test_loss", "test_acc", "ggap")
METRIC_FIELDS = {"lambda_max": "lambda_max", "hessian_trace": "hessian_trace", "trace": "hessian_trace",
                 "mc": "mc_mean", "cka": "cka_mean"}
PAIRWISE_FIELDS = ("mc", "cka")


class GridSpecError(ValueError):
    """The grid definition is malformed."""


class SchemaError(KeyError):
    """Unknown or unavailable grid field."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class IncompleteZooError(RuntimeError):
    def __init__(self, message: str, cells: list[str]):
        super().__init__(message)
        self.cells = cells


def dump_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=True) + "\n"


def write_json(path: Path, obj: Any) -> None:
    # write-then-rename so a reader never sees a half-written file
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dump_json(obj), encoding="utf-8")
    os.replace(tmp, path)


def read_json(path: Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class GridSpec:
    widths: tuple[int, ...]
    batch_sizes: tuple[int, ...]
    seeds: tuple[int, ...]
    base_spec: ModelSpec
    base_config: TrainConfig
    dataset: DatasetSpec
    pairwise: bool = True

    def __post_init__(self):
        for name in ("widths", "batch_sizes", "seeds"):
            values = tuple(int(v) for v in getattr(self, name))
            object.__setattr__(self, name, values)
            if not values:
                raise GridSpecError(f"{name} must be nonempty")
            if len(set(values)) != len(values):
                raise GridSpecError(f"{name} contains duplicates: {list(values)}")
        for name in ("widths", "batch_sizes"):
            values = getattr(self, name)
            if any(v <= 0 for v in values):
                raise GridSpecError(f"{name} must be positive")
            if list(values) != sorted(values):
                raise GridSpecError(f"{name} must be ascending")
        if any(s < 0 or s >= 2**64 for s in self.seeds):
            raise GridSpecError("seeds must be 64-bit unsigned integers")
        if self.pairwise and len(self.seeds) < 2:
            raise GridSpecError("pairwise metrics need at least two seeds")

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths), "batch_sizes": list(self.batch_sizes), "seeds": list(self.seeds),
            "base_spec": self.base_spec.to_dict(), "base_config": self.base_config.to_dict(),
            "dataset": self.dataset.to_dict(), "pairwise": self.pairwise,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(d["widths"], d["batch_sizes"], d["seeds"], ModelSpec.from_dict(d["base_spec"]),
                   TrainConfig.from_dict(d["base_config"]), DatasetSpec.from_dict(d["dataset"]),
                   d.get("pairwise", True))

    def model_spec(self, cell: "GridCell") -> ModelSpec:
        return replace(self.base_spec, hidden_width=cell.width, seed=cell.seed)

    def train_config(self, cell: "GridCell") -> TrainConfig:
        return replace(self.base_config, batch_size=cell.batch_size, seed=cell.seed)


@dataclass(frozen=True)
class GridCell:
    width: int
    batch_size: int
    seed: int
    status: str = "pending"

    @property
    def key(self) -> str:
        return cell_key(self.width, self.batch_size, self.seed)

    @property
    def config_key(self) -> tuple[int, int]:
        return (self.width, self.batch_size)


def cell_key(width: int, batch_size: int, seed: int) -> str:
    return f"w{width}_bs{batch_size}_s{seed}"


def plan_grid(grid: GridSpec) -> list[GridCell]:
    return [GridCell(w, b, s) for w in grid.widths for b in grid.batch_sizes for s in grid.seeds]


@dataclass
class CellEntry:
    cell: GridCell
    path: str
    final: EpochRecord | None = None
    metrics: dict | None = None
    error: str | None = None

    @property
    def status(self) -> str:
        return self.cell.status


@dataclass
class ZooManifest:
    root: Path
    grid: GridSpec
    cells: dict[str, CellEntry] = field(default_factory=dict)

    @classmethod
    def create(cls, root: str | Path, grid: GridSpec) -> "ZooManifest":
        root = Path(root)
        manifest = cls(root, grid, {c.key: CellEntry(c, c.key) for c in plan_grid(grid)})
        root.mkdir(parents=True, exist_ok=True)
        manifest.refresh()
        manifest.save()
        return manifest

    @classmethod
    def load(cls, root: str | Path) -> "ZooManifest":
        root = Path(root)
        data = read_json(root / "manifest.json")
        grid = GridSpec.from_dict(data["grid"])
        manifest = cls(root, grid, {c.key: CellEntry(c, c.key) for c in plan_grid(grid)})
        for key, entry in data.get("cells", {}).items():
            if key in manifest.cells and entry.get("error"):
                manifest.cells[key].error = entry["error"]
        manifest.refresh()
        return manifest

    def cell_dir(self, key: str) -> Path:
        return self.root / self.cells[key].path

    def refresh(self) -> None:
        """Rebuild cell state from the per-cell files on disk."""
        for key, entry in self.cells.items():
            d = self.root / entry.path
            status, final = "pending", None
            if is_complete(d):
                res = read_json(d / "results.json")
                status = res["status"]
                final = EpochRecord.from_dict(res["final"])
                entry.error = None
            entry.cell = replace(entry.cell, status=status)
            entry.final = final
            metrics_path = d / "metrics.json"
            entry.metrics = read_json(metrics_path) if metrics_path.exists() else None

    def to_dict(self) -> dict:
        cells = {}
        for key, e in self.cells.items():
            cells[key] = {
                "width": e.cell.width, "batch_size": e.cell.batch_size, "seed": e.cell.seed,
                "status": e.status, "path": e.path,
                "final": e.final.to_dict() if e.final else None,
                "metrics": e.metrics, "error": e.error,
            }
        return {"grid": self.grid.to_dict(), "cells": cells}

    def save(self) -> None:
        write_json(self.root / "manifest.json", self.to_dict())

    def incomplete(self) -> list[str]:
        return [k for k, e in self.cells.items() if e.status == "pending"]

    def require_complete(self) -> None:
        pending = self.incomplete()
        if pending:
            raise IncompleteZooError(f"{len(pending)} of {len(self.cells)} cells incomplete", pending)

    def entries_for(self, width: int, batch_size: int) -> list[CellEntry]:
        return [self.cells[cell_key(width, batch_size, s)] for s in self.grid.seeds]

    def load_run(self, key: str) -> tuple[ModelSpec, TrainConfig, dict]:
        d = self.cell_dir(key)
        cfg = read_json(d / "config.json")
        return ModelSpec.from_dict(cfg["model"]), TrainConfig.from_dict(cfg["train"]), read_json(d / "results.json")

    def load_params(self, key: str, epoch: int | None = None) -> ParameterVector:
        d = self.cell_dir(key)
        if epoch is None:
            epoch = read_json(d / "results.json")["checkpoint_epochs"][-1]
        return load_checkpoint(d / "checkpoints" / f"epoch_{epoch}")

    def checkpoint_epochs(self, key: str) -> list[int]:
        return read_json(self.cell_dir(key) / "results.json")["checkpoint_epochs"]


def is_complete(cell_dir: Path) -> bool:
    res = cell_dir / "results.json"
    if not res.exists() or not (cell_dir / "config.json").exists():
        return False
    try:
        data = read_json(res)
    except (OSError, json.JSONDecodeError):
        return False
    if data.get("status") not in ("done", "diverged"):
        return False
    return all((cell_dir / "checkpoints" / f"epoch_{e}" / "model.bin").exists() for e in data["checkpoint_epochs"])


def run_record_to_json(cell: GridCell, run) -> dict:
    return {
        "cell": cell.key,
        "status": "diverged" if run.diverged else "done",
        "initial": run.initial.to_dict(),
        "history": [r.to_dict() for r in run.history],
        "final": run.final.to_dict(),
        "generalization_gap": run.generalization_gap,
        "checkpoint_epochs": [e for e, _ in run.checkpoints],
    }


def run_cell(root: str, grid_dict: dict, cell: GridCell) -> tuple[str, str, str | None]:
    """Train one cell and write its folder. Returns (key, status, error)."""
    grid = GridSpec.from_dict(grid_dict)
    d = Path(root) / cell.key
    try:
        with threadpool_limits(limits=1):
            spec, config = grid.model_spec(cell), grid.train_config(cell)
            data = grid.dataset.build()
            run = train(spec, data, config)
        d.mkdir(parents=True, exist_ok=True)
        write_json(d / "config.json", {"model": spec.to_dict(), "train": config.to_dict(),
                                       "dataset": grid.dataset.to_dict(),
                                       "cell": {"width": cell.width, "batch_size": cell.batch_size,
                                                "seed": cell.seed}})
        for epoch, params in run.checkpoints:
            save_checkpoint(d / "checkpoints" / f"epoch_{epoch}", params)
        results = run_record_to_json(cell, run)
        write_json(d / "results.json", results)
        return cell.key, results["status"], None
    except OSError as exc:
        log.warning("cell %s failed to write: %s", cell.key, exc)
        return cell.key, "pending", f"write failure: {exc}"


def run_grid(manifest: ZooManifest, workers: int = 1, limit: int | None = None) -> ZooManifest:
    """Train every pending cell. Completed cells are never touched.

    ``limit`` caps how many cells this call trains (used to simulate an
    interrupted run).
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    manifest.refresh()
    todo = [e.cell for e in manifest.cells.values() if e.status == "pending"]
    if limit is not None:
        todo = todo[:limit]
    grid_dict = manifest.grid.to_dict()
    root = str(manifest.root)
    if workers == 1 or len(todo) <= 1:
        outcomes = [run_cell(root, grid_dict, c) for c in todo]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_cell, [root] * len(todo), [grid_dict] * len(todo), todo))
    manifest.refresh()
    for key, _, error in outcomes:
        manifest.cells[key].error = error
    manifest.save()
    return manifest


# ---------------------------------------------------------------------------
# grid tables


@dataclass
class GridTable:
    """A widths x batch_sizes matrix. Missing entries are NaN (numeric) or None (labels)."""

    field: str
    widths: tuple[int, ...]
    batch_sizes: tuple[int, ...]
    values: np.ndarray
    per_seed: np.ndarray | None = None

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.batch_sizes = tuple(int(b) for b in self.batch_sizes)
        if self.values.shape != (len(self.widths), len(self.batch_sizes)):
            raise ValueError(f"values shape {self.values.shape} does not match the axes")

    def at(self, width: int, batch_size: int):
        return self.values[self.widths.index(width), self.batch_sizes.index(batch_size)]

    def missing(self) -> np.ndarray:
        if self.values.dtype == object:
            return np.vectorize(lambda v: v is None, otypes=[bool])(self.values)
        return np.isnan(self.values)


def _run_value(entry: CellEntry, name: str) -> float:
    f = entry.final
    if name == "ggap":
        return f.test_loss - f.train_loss
    return getattr(f, name)


def collect_grid(manifest: ZooManifest, field_name: str) -> GridTable:
    """Seed-mean table of one field. Any pending or diverged seed makes the entry missing."""
    grid = manifest.grid
    if field_name not in RUN_FIELDS and field_name not in METRIC_FIELDS:
        raise SchemaError(f"unknown field {field_name!r}; known: {', '.join(RUN_FIELDS + tuple(METRIC_FIELDS))}")
    if field_name in PAIRWISE_FIELDS and len(grid.seeds) < 2:
        raise SchemaError(f"{field_name!r} is a pairwise metric and needs at least two seeds")
    shape = (len(grid.widths), len(grid.batch_sizes), len(grid.seeds))
    per_seed = np.full(shape, np.nan)
    values = np.full(shape[:2], np.nan)
    for i, w in enumerate(grid.widths):
        for j, b in enumerate(grid.batch_sizes):
            ok = True
            for k, entry in enumerate(manifest.entries_for(w, b)):
                if entry.status != "done":
                    ok = False
                    continue
                if field_name in RUN_FIELDS:
                    per_seed[i, j, k] = _run_value(entry, field_name)
                elif entry.metrics is not None and entry.metrics.get(METRIC_FIELDS[field_name]) is not None:
                    per_seed[i, j, k] = entry.metrics[METRIC_FIELDS[field_name]]
                else:
                    ok = False
            if ok and np.all(np.isfinite(per_seed[i, j])):
                values[i, j] = float(np.mean(per_seed[i, j]))
    return GridTable(field_name, grid.widths, grid.batch_sizes, values, per_seed)


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, str):
        return v
    v = float(v)
    return "NA" if math.isnan(v) else format(v, ".17g")


def export_grid_csv(table: GridTable, path: str | Path) -> Path:
    """Header row holds batch sizes, first column holds widths; ``NA`` marks missing entries."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["width\\batch_size"] + [str(b) for b in table.batch_sizes])
        for w, row in zip(table.widths, table.values):
            writer.writerow([str(w)] + [_fmt(v) for v in row])
    return path


def read_grid_csv(path: str | Path, field_name: str = "", labels: bool = False) -> GridTable:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    batch_sizes = [int(b) for b in rows[0][1:]]
    widths = [int(r[0]) for r in rows[1:]]
    if labels:
        values = np.array([[None if v == "NA" else v for v in r[1:]] for r in rows[1:]], dtype=object)
    else:
        values = np.array([[np.nan if v == "NA" else float(v) for v in r[1:]] for r in rows[1:]], dtype=float)
    return GridTable(field_name, widths, batch_sizes, values.reshape(len(widths), len(batch_sizes)))

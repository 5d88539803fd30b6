"""Five-phase classification by a hierarchical threshold tree, and fitting of its thresholds."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .zoo import GridTable, ZooManifest, read_json, write_json


class CoverageError(ValueError):
    def __init__(self, missing: list["PhaseLabel"]):
        super().__init__("labels do not cover phases: " + ", ".join(p.token for p in missing))
        self.missing = missing


class PhaseLabel(enum.Enum):
    I = "I"
    II = "II"
    III = "III"
    IV_A = "IV_A"
    IV_B = "IV_B"

    @property
    def token(self) -> str:
        return self.value.replace("_", "")

    @classmethod
    def parse(cls, text: str) -> "PhaseLabel":
        norm = text.strip().upper().replace("-", "").replace("_", "")
        for p in cls:
            if p.token == norm:
                return p
        raise ValueError(f"unknown phase {text!r}")


TREE_ORDER = ("tau_loss", "tau_mc", "tau_cka", "tau_trace")


@dataclass
class MetricRecord:
    train_loss: float
    test_acc: float
    generalization_gap: float
    lambda_max: float
    hessian_trace: float
    mc: float
    cka: float
    cell: str | None = None

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.train_loss, self.test_acc, self.generalization_gap,
                                              self.lambda_max, self.hessian_trace, self.mc, self.cka))


@dataclass
class PhaseThresholds:
    tau_loss: float
    tau_mc: float
    tau_cka: float
    tau_trace: float = math.inf
    accuracy: float | None = None
    low_confidence: bool | None = None
    provisional: bool = False

    def __post_init__(self):
        if not 0.0 <= self.tau_cka <= 1.0:
            raise ValueError(f"tau_cka must lie in [0, 1], got {self.tau_cka}")
        if self.tau_mc > 0:
            raise ValueError(f"tau_mc must be nonpositive, got {self.tau_mc}")

    def to_dict(self) -> dict:
        return {
            "tau_loss": self.tau_loss, "tau_mc": self.tau_mc, "tau_cka": self.tau_cka,
            "tau_trace": None if math.isinf(self.tau_trace) else self.tau_trace,
            "accuracy": self.accuracy, "low_confidence": self.low_confidence, "provisional": self.provisional,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseThresholds":
        d = dict(d)
        if d.get("tau_trace") is None:
            d["tau_trace"] = math.inf
        return cls(**d)

    def save(self, path: str | Path) -> None:
        write_json(Path(path), self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> "PhaseThresholds":
        return cls.from_dict(read_json(Path(path)))


def classify(record: MetricRecord, thresholds: PhaseThresholds) -> PhaseLabel:
    t = thresholds
    if record.train_loss > t.tau_loss:
        return PhaseLabel.I if record.mc < t.tau_mc else PhaseLabel.II
    if record.mc < t.tau_mc:
        return PhaseLabel.III
    if record.cka >= t.tau_cka and record.hessian_trace <= t.tau_trace:
        return PhaseLabel.IV_B
    return PhaseLabel.IV_A


def _classify_arrays(loss, mc, cka, trace, t: dict) -> np.ndarray:
    # codes 0..4 follow PhaseLabel order
    high = loss > t["tau_loss"]
    barrier = mc < t["tau_mc"]
    good = (cka >= t["tau_cka"]) & (trace <= t["tau_trace"])
    return np.where(high, np.where(barrier, 0, 1), np.where(barrier, 2, np.where(good, 4, 3)))


_CODES = list(PhaseLabel)


def accuracy(records: Sequence[MetricRecord], labels: Sequence[PhaseLabel], thresholds: PhaseThresholds) -> float:
    pred = [classify(r, thresholds) for r in records]
    return float(np.mean([p == l for p, l in zip(pred, labels)]))


def _plateaus(values: np.ndarray, lo: float, hi: float) -> list[tuple[float, float]]:
    inside = np.unique(values[(values > lo) & (values < hi)])
    edges = [lo, *inside.tolist(), hi]
    return [(a, b) for a, b in zip(edges[:-1], edges[1:])]


def _best_threshold(axis: str, columns: dict, y: np.ndarray, current: dict, bounds: tuple[float, float]) -> tuple[float, float]:
    """Exact maximizer of accuracy over one threshold, others fixed.

    Accuracy is piecewise constant with breakpoints at the observed values, so
    scoring one point strictly inside every interval between consecutive
    breakpoints is exhaustive. Adjacent best intervals merge into plateaus;
    the widest plateau wins and its midpoint is returned.
    """
    lo, hi = bounds
    values = columns[{"tau_loss": "loss", "tau_mc": "mc", "tau_cka": "cka", "tau_trace": "trace"}[axis]]
    intervals = _plateaus(values, lo, hi)
    scores = []
    for a, b in intervals:
        trial = dict(current)
        trial[axis] = 0.5 * (a + b)
        pred = _classify_arrays(columns["loss"], columns["mc"], columns["cka"], columns["trace"], trial)
        scores.append(float(np.mean(pred == y)))
    best = max(scores)
    plateaus, start = [], None
    for k, s in enumerate(scores + [-1.0]):
        if s == best and start is None:
            start = k
        elif s != best and start is not None:
            plateaus.append((intervals[start][0], intervals[k - 1][1]))
            start = None
    a, b = max(plateaus, key=lambda p: p[1] - p[0])
    return 0.5 * (a + b), best


def default_bounds(records: Sequence[MetricRecord]) -> dict:
    loss = np.array([r.train_loss for r in records])
    trace = np.array([r.hessian_trace for r in records])
    pad_l = 1e-9 + 1e-6 * (loss.max() - loss.min())
    pad_t = 1e-9 + 1e-6 * (trace.max() - trace.min())
    return {"tau_loss": (float(loss.min() - pad_l), float(loss.max() + pad_l)),
            "tau_mc": (-1.0, 0.0),
            "tau_cka": (0.0, 1.0),
            "tau_trace": (float(trace.min() - pad_t), float(trace.max() + pad_t))}


def fit_thresholds(records: Sequence[MetricRecord], labels: Sequence[PhaseLabel], bounds: dict | None = None,
                   max_rounds: int = 20, confidence_floor: float = 0.5) -> PhaseThresholds:
    """Coordinate-wise accuracy maximization in tree order (loss, mc, cka, trace).

    Each threshold is set to the exact optimum over its bounded interval
    given the others; sweeps repeat until nothing moves. The result records
    its training accuracy and a low-confidence flag below ``confidence_floor``.
    """
    if len(records) != len(labels):
        raise ValueError("records and labels differ in length")
    missing = [p for p in PhaseLabel if p not in set(labels)]
    if missing:
        raise CoverageError(missing)
    b = default_bounds(records)
    b.update(bounds or {})
    columns = {
        "loss": np.array([r.train_loss for r in records], dtype=float),
        "mc": np.array([r.mc for r in records], dtype=float),
        "cka": np.array([r.cka for r in records], dtype=float),
        "trace": np.array([r.hessian_trace for r in records], dtype=float),
    }
    y = np.array([_CODES.index(l) for l in labels])
    current = {k: 0.5 * (b[k][0] + b[k][1]) for k in TREE_ORDER}
    best = 0.0
    for _ in range(max_rounds):
        moved = False
        for axis in TREE_ORDER:
            value, best = _best_threshold(axis, columns, y, current, b[axis])
            if value != current[axis]:
                current[axis] = value
                moved = True
        if not moved:
            break
    return PhaseThresholds(current["tau_loss"], min(current["tau_mc"], 0.0), float(np.clip(current["tau_cka"], 0, 1)),
                           current["tau_trace"], accuracy=best, low_confidence=best < confidence_floor)


# ---------------------------------------------------------------------------
# provisional labels


def _otsu_split(values: np.ndarray) -> float:
    """Split point maximizing between-class variance (1-D two-class Otsu)."""
    v = np.sort(values)
    if v[0] == v[-1]:
        return float(v[0])
    best, split = -1.0, 0.5 * (v[0] + v[-1])
    for k in range(1, v.size):
        if v[k] == v[k - 1]:
            continue
        left, right = v[:k], v[k:]
        score = left.size * right.size * (left.mean() - right.mean()) ** 2
        if score > best:
            best, split = score, 0.5 * (v[k - 1] + v[k])
    return float(split)


def provisional_thresholds(records: Sequence[MetricRecord]) -> PhaseThresholds:
    """Heuristic starting thresholds for zoos without annotated reference models.

    Train loss is split by Otsu's method in log space; a barrier must exceed
    half the loss cut; IV-A/IV-B are split at the median CKA and the upper
    quartile of the trace among the remaining low-loss, barrier-free models.
    """
    loss = np.array([r.train_loss for r in records])
    mc = np.array([r.mc for r in records])
    tau_loss = float(10 ** _otsu_split(np.log10(np.maximum(loss, 1e-12))))
    tau_mc = float(np.clip(-0.5 * tau_loss, -1.0, 0.0))
    iv = (loss <= tau_loss) & (mc >= tau_mc)
    pool = [r for r, keep in zip(records, iv) if keep] or list(records)
    tau_cka = float(np.clip(np.median([r.cka for r in pool]), 0.0, 1.0))
    tau_trace = float(np.percentile([r.hessian_trace for r in pool], 75))
    return PhaseThresholds(tau_loss, tau_mc, tau_cka, tau_trace, provisional=True)


# ---------------------------------------------------------------------------
# zoo level


def records_from_manifest(manifest: ZooManifest, level: str = "config") -> list[MetricRecord]:
    """Metric records per (width, batch) seed-mean (``config``) or per model (``model``)."""
    grid = manifest.grid
    out = []
    for w in grid.widths:
        for b in grid.batch_sizes:
            entries = manifest.entries_for(w, b)
            if any(e.status != "done" or not e.metrics or e.metrics.get("mc_mean") is None for e in entries):
                continue
            recs = []
            for e in entries:
                f, m = e.final, e.metrics
                recs.append(MetricRecord(f.train_loss, f.test_acc, f.test_loss - f.train_loss, m["lambda_max"],
                                         m["hessian_trace"], m["mc_mean"], m["cka_mean"], e.cell.key))
            if level == "model":
                out.extend(recs)
            else:
                out.append(_mean_record(recs, f"w{w}_bs{b}"))
    return out


def _mean_record(recs: list[MetricRecord], cell: str) -> MetricRecord:
    names = ("train_loss", "test_acc", "generalization_gap", "lambda_max", "hessian_trace", "mc", "cka")
    return MetricRecord(*(float(np.mean([getattr(r, n) for r in recs])) for n in names), cell=cell)


@dataclass
class PhaseGrid:
    table: GridTable
    unlabeled: list[str] = field(default_factory=list)


def phase_grid(manifest: ZooManifest, thresholds: PhaseThresholds) -> PhaseGrid:
    """Label each (width, batch) configuration from its seed-mean metrics."""
    grid = manifest.grid
    values = np.full((len(grid.widths), len(grid.batch_sizes)), None, dtype=object)
    records = {r.cell: r for r in records_from_manifest(manifest, "config")}
    unlabeled = []
    for i, w in enumerate(grid.widths):
        for j, b in enumerate(grid.batch_sizes):
            rec = records.get(f"w{w}_bs{b}")
            if rec is None or not rec.is_finite():
                unlabeled.append(f"w{w}_bs{b}")
                continue
            values[i, j] = classify(rec, thresholds).token
    return PhaseGrid(GridTable("phase", grid.widths, grid.batch_sizes, values), unlabeled)

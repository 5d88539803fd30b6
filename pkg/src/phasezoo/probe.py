"""Linear probes from weight statistics to performance and landscape metrics."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn import LayoutEntry, ParameterVector
from .zoo import ZooManifest, read_json, write_json

STATISTICS = ("mean", "std", "min", "q20", "q40", "q60", "q80", "max")
TARGETS = ("test_acc", "ggap", "cka", "log_hessian_trace", "mc")
DEFAULT_LAMBDAS = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)
MIN_CELLS = 10


class SampleSizeError(ValueError):
    pass


class UndefinedR2Error(ValueError):
    pass


@dataclass(frozen=True)
class WeightFeatures:
    values: np.ndarray
    names: tuple[str, ...]


def _stats(x: np.ndarray) -> list[float]:
    q = np.percentile(x, [0, 20, 40, 60, 80, 100])  # linear interpolation
    return [float(x.mean()), float(x.std()), q[0], q[1], q[2], q[3], q[4], q[5]]


def weight_features(params: ParameterVector, layout: Sequence[LayoutEntry] | None = None) -> WeightFeatures:
    """Per layer: mean, std, min, 20/40/60/80th percentiles and max of the weights, then of the biases."""
    if layout is not None and tuple(layout) != tuple(params.layout):
        params = ParameterVector(params.values, tuple(layout))
    values, names = [], []
    for layer, (w, b) in enumerate(params.weights_and_biases()):
        for kind, arr in (("weight", w), ("bias", b)):
            values += _stats(np.asarray(arr, dtype=float).ravel())
            names += [f"layer{layer}.{kind}.{s}" for s in STATISTICS]
    return WeightFeatures(np.array(values), tuple(names))


# ---------------------------------------------------------------------------
# ridge regression


@dataclass
class RidgeModel:
    coef: np.ndarray  # in the original feature units; zero for dropped features
    intercept: float
    ridge_lambda: float
    kept: np.ndarray

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=float) @ self.coef + self.intercept


def fit_ridge(features: np.ndarray, targets: np.ndarray, ridge_lambda: float) -> RidgeModel:
    """Ridge on standardized features with an unpenalized intercept.

    Minimizes mean squared residual + lambda * |w|^2 over the standardized
    coefficients. Dividing the residual by the row count makes the solution
    unchanged when every row is repeated. Zero-variance columns are dropped.
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("features must be (rows, columns) matching targets")
    if x.shape[0] < 2:
        raise SampleSizeError("ridge needs at least two rows")
    if ridge_lambda < 0:
        raise ValueError("lambda must be nonnegative")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    kept = scale > 1e-12 * np.maximum(1.0, np.abs(mean))
    if not kept.all():
        warnings.warn(f"dropping {int((~kept).sum())} zero-variance feature(s)", RuntimeWarning, stacklevel=2)
    coef = np.zeros(x.shape[1])
    y_mean = float(y.mean())
    if kept.any():
        z = (x[:, kept] - mean[kept]) / scale[kept]
        n = x.shape[0]
        gram = z.T @ z / n + ridge_lambda * np.eye(z.shape[1])
        rhs = z.T @ (y - y_mean) / n
        if ridge_lambda > 0:
            w = np.linalg.solve(gram, rhs)
        else:
            w = np.linalg.lstsq(gram, rhs, rcond=None)[0]
        coef[kept] = w / scale[kept]
    intercept = y_mean - float(mean @ coef)
    return RidgeModel(coef, intercept, float(ridge_lambda), kept)


def r2_score(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or truth.size < 2:
        raise ValueError("need equal-length vectors with at least two entries")
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    if ss_tot <= 1e-15 * max(1.0, float(np.sum(truth ** 2))):
        raise UndefinedR2Error("R^2 is undefined for a constant target")
    return 1.0 - float(np.sum((truth - pred) ** 2)) / ss_tot


# ---------------------------------------------------------------------------
# probe protocol


@dataclass
class ProbeReport:
    target: str
    r2_test: float
    ridge_lambda: float
    split: tuple[float, int]
    n_train_cells: int
    n_test_cells: int
    n_rows: int
    validation_r2: dict = field(default_factory=dict)
    standardized: bool = True
    dropped_features: list[str] = field(default_factory=list)
    permutation_seed: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = {"train_fraction": self.split[0], "seed": self.split[1]}
        d["validation_r2"] = {repr(k): v for k, v in self.validation_r2.items()}
        return d


def _split_groups(groups: Sequence, fraction: float, seed: int) -> tuple[set, set]:
    unique = sorted(set(groups))
    order = np.random.default_rng(seed).permutation(len(unique))
    n_train = min(max(1, int(round(fraction * len(unique)))), len(unique) - 1)
    train = {unique[i] for i in order[:n_train]}
    return train, set(unique) - train


def probe_arrays(features: np.ndarray, targets: np.ndarray, groups: Sequence, target: str = "target",
                 split_seed: int = 0, train_fraction: float = 0.8,
                 lambda_grid: Sequence[float] = DEFAULT_LAMBDAS, names: Sequence[str] | None = None,
                 permutation_seed: int | None = None) -> ProbeReport:
    """Group-wise outer split, inner group-wise validation split to pick lambda, R^2 on held-out groups."""
    x = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float).copy()
    groups = list(groups)
    if permutation_seed is not None:
        y = y[np.random.default_rng(permutation_seed).permutation(y.size)]
    n_groups = len(set(groups))
    if n_groups < MIN_CELLS:
        raise SampleSizeError(f"probe needs at least {MIN_CELLS} cells, got {n_groups}")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    train_g, test_g = _split_groups(groups, train_fraction, split_seed)
    train_rows = np.array([g in train_g for g in groups])
    fit_g, val_g = _split_groups([g for g in groups if g in train_g], 0.75, split_seed + 1)
    fit_rows = np.array([g in fit_g for g in groups])
    val_rows = np.array([g in val_g for g in groups])
    scores = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for lam in lambda_grid:
            model = fit_ridge(x[fit_rows], y[fit_rows], lam)
            try:
                scores[lam] = r2_score(model.predict(x[val_rows]), y[val_rows])
            except UndefinedR2Error:
                scores[lam] = -math.inf
    best = max(lambda_grid, key=lambda lam: (scores[lam], lam))
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        model = fit_ridge(x[train_rows], y[train_rows], best)
    dropped = [names[i] for i in np.flatnonzero(~model.kept)] if names is not None else []
    r2 = r2_score(model.predict(x[~train_rows]), y[~train_rows])
    return ProbeReport(target, r2, float(best), (train_fraction, split_seed), len(train_g), len(test_g), len(y),
                       scores, True, dropped, permutation_seed)


def probe_dataset(manifest: ZooManifest, target: str) -> tuple[np.ndarray, np.ndarray, list[str], tuple[str, ...]]:
    """Feature matrix, target vector and cell group of every completed model carrying the target."""
    if target not in TARGETS:
        raise ValueError(f"unknown probe target {target!r}; known: {', '.join(TARGETS)}")
    rows, ys, groups, names = [], [], [], ()
    for w in manifest.grid.widths:
        for b in manifest.grid.batch_sizes:
            for e in manifest.entries_for(w, b):
                if e.status != "done":
                    continue
                value = _target_value(e, target)
                if value is None or not math.isfinite(value):
                    continue
                feats = weight_features(manifest.load_params(e.cell.key))
                rows.append(feats.values)
                names = feats.names
                ys.append(value)
                groups.append(f"w{w}_bs{b}")
    if not rows:
        raise SampleSizeError(f"no models carry target {target!r}")
    return np.vstack(rows), np.array(ys), groups, names


def _target_value(entry, target: str) -> float | None:
    f, m = entry.final, entry.metrics or {}
    if target == "test_acc":
        return f.test_acc
    if target == "ggap":
        return f.test_loss - f.train_loss
    if target == "log_hessian_trace":
        tr = m.get("hessian_trace")
        return math.log10(tr) if tr is not None and tr > 0 else None
    return m.get({"cka": "cka_mean", "mc": "mc_mean"}[target])


def run_probe(manifest: ZooManifest, target: str, split_seed: int = 0, train_fraction: float = 0.8,
              lambda_grid: Sequence[float] = DEFAULT_LAMBDAS, permutation_seed: int | None = None,
              write: bool = True) -> ProbeReport:
    x, y, groups, names = probe_dataset(manifest, target)
    report = probe_arrays(x, y, groups, target, split_seed, train_fraction, lambda_grid, names, permutation_seed)
    if write:
        path = Path(manifest.root) / "probe_report.json"
        existing = read_json(path) if path.exists() else {"reports": {}}
        key = target if permutation_seed is None else f"{target}@permuted{permutation_seed}"
        existing["reports"][key] = report.to_dict()
        write_json(path, existing)
    return report


def export_features_csv(manifest: ZooManifest, path: str | Path) -> Path:
    path = Path(path)
    header: list[str] | None = None
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for cell in (e for w in manifest.grid.widths for b in manifest.grid.batch_sizes
                     for e in manifest.entries_for(w, b) if e.status == "done"):
            feats = weight_features(manifest.load_params(cell.cell.key))
            if header is None:
                header = ["cell", *feats.names]
                writer.writerow(header)
            writer.writerow([cell.cell.key, *(f"{v:.17g}" for v in feats.values)])
    return path

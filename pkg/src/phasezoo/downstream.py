"""Downstream procedures evaluated per grid cell: pruning, ensembling, weight averaging, fine-tuning."""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .data import DataPair, Dataset, DatasetSpec
from .nn import ModelSpec, ParameterVector, ShapeError, flatten, forward, kaiming_uniform, layout_for, softmax
from .trainer import RunRecord, TrainConfig, evaluate, train
from .zoo import GridTable, ZooManifest, write_json

METHODS = ("base", "prune", "ensemble", "avg_naive", "avg_aligned", "avg_epochs", "interpolate", "finetune")


# ---------------------------------------------------------------------------
# pruning and ensembling


def prune_magnitude(params: ParameterVector, sparsity: float) -> ParameterVector:
    """Zero the floor(sparsity * m) smallest-magnitude weights globally; biases are exempt.

    Ties in magnitude are broken by position in the flat vector (earlier first).
    """
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity must lie in [0, 1], got {sparsity}")
    mask = params.weight_mask()
    index = np.flatnonzero(mask)
    count = math.floor(sparsity * index.size)
    values = params.values.copy()
    if count:
        order = np.argsort(np.abs(values[index]), kind="stable")
        values[index[order[:count]]] = 0.0
    return params.with_values(values)


def _check_models(models: Sequence[ParameterVector]) -> None:
    if not models:
        raise ValueError("need at least one model")
    for m in models[1:]:
        if not models[0].same_layout(m):
            raise ShapeError("models have different parameter layouts")


def ensemble_probabilities(models: Sequence[ParameterVector], spec: ModelSpec, inputs: np.ndarray) -> np.ndarray:
    _check_models(models)
    probs = softmax(forward(models[0], spec, inputs))
    for m in models[1:]:
        probs = probs + softmax(forward(m, spec, inputs))
    return probs / len(models)


def ensemble_accuracy(models: Sequence[ParameterVector], spec: ModelSpec, data: Dataset) -> float:
    probs = ensemble_probabilities(models, spec, data.inputs)
    return float(np.mean(np.argmax(probs, axis=1) == data.labels))


# ---------------------------------------------------------------------------
# weight averaging


def average_naive(models: Sequence[ParameterVector]) -> ParameterVector:
    _check_models(models)
    total = models[0].values.copy()
    for m in models[1:]:
        total += m.values
    return models[0].with_values(total / len(models))


def interpolate(a: ParameterVector, b: ParameterVector, alpha: float) -> ParameterVector:
    if not a.same_layout(b):
        raise ShapeError("cannot interpolate between different layouts")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return a.with_values(a.values.copy())
    if alpha == 1.0:
        return b.with_values(b.values.copy())
    if alpha == 0.5:
        # same arithmetic as average_naive so the two agree exactly
        return average_naive([a, b])
    return a.with_values((1.0 - alpha) * a.values + alpha * b.values)


def average_epochs(run: RunRecord | Sequence[ParameterVector], last_k: int) -> ParameterVector:
    """Mean of the last ``last_k`` checkpoints of a run (or of a checkpoint list)."""
    checkpoints = [p for _, p in run.checkpoints] if isinstance(run, RunRecord) else list(run)
    if last_k < 1:
        raise ValueError("last_k must be >= 1")
    if len(checkpoints) < last_k:
        raise ValueError(f"run has {len(checkpoints)} checkpoints, fewer than last_k={last_k}")
    return average_naive(checkpoints[-last_k:])


# ---------------------------------------------------------------------------
# linear assignment and permutation alignment


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment of rows to columns (rows <= columns), O(n^2 m).

    Shortest augmenting paths with row/column potentials. Returns ``col`` with
    ``col[i]`` the column assigned to row ``i``.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    n, m = cost.shape
    if n > m:
        raise ValueError("need at least as many columns as rows")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=int)  # owner[j]: 1-based row matched to column j, 0 if free
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        min_slack = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            slack = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (slack < min_slack[1:])
            min_slack[1:][better] = slack[better]
            way[1:][better] = j0
            candidates = np.where(free, min_slack[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            min_slack[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col = np.empty(n, dtype=int)
    for j in range(1, m + 1):
        if owner[j]:
            col[owner[j] - 1] = j - 1
    return col


def assignment_cost(cost: np.ndarray, col: np.ndarray) -> float:
    return float(np.asarray(cost)[np.arange(len(col)), col].sum())


@dataclass(frozen=True)
class PermutationMap:
    """For each hidden layer, ``perms[l][j]`` is the original unit placed at position ``j``."""

    perms: tuple[np.ndarray, ...]

    def __post_init__(self):
        for k, p in enumerate(self.perms):
            if not np.array_equal(np.sort(p), np.arange(len(p))):
                raise ValueError(f"layer {k}: not a permutation")

    @classmethod
    def identity(cls, spec: ModelSpec) -> "PermutationMap":
        return cls(tuple(np.arange(spec.hidden_width) for _ in range(spec.num_hidden_layers)))

    @classmethod
    def random(cls, spec: ModelSpec, rng: np.random.Generator) -> "PermutationMap":
        return cls(tuple(rng.permutation(spec.hidden_width) for _ in range(spec.num_hidden_layers)))

    def is_identity(self) -> bool:
        return all(np.array_equal(p, np.arange(len(p))) for p in self.perms)

    def to_lists(self) -> list[list[int]]:
        return [p.tolist() for p in self.perms]


def apply_permutation(params: ParameterVector, spec: ModelSpec, pmap: PermutationMap) -> ParameterVector:
    """Reorder hidden units; the network computes the same function afterwards."""
    if len(pmap.perms) != spec.num_hidden_layers:
        raise ShapeError("permutation map does not match the number of hidden layers")
    tensors = []
    upstream = None
    for layer, (w, b) in enumerate(params.weights_and_biases()):
        if upstream is not None:
            w = w[upstream, :]
        if layer < spec.num_hidden_layers:
            perm = pmap.perms[layer]
            if len(perm) != w.shape[1]:
                raise ShapeError(f"layer {layer}: permutation of length {len(perm)} for {w.shape[1]} units")
            w, b = w[:, perm], b[perm]
            upstream = perm
        tensors += [w, b]
    return flatten(tensors, params.layout)


def align_permutations(reference: ParameterVector, candidate: ParameterVector,
                       spec: ModelSpec) -> tuple[PermutationMap, ParameterVector]:
    """Weight matching: permute the candidate's hidden units to best match the reference.

    Layer by layer, each unit is described by its incoming weights (rows already
    reordered by the upstream match) and its bias; the assignment maximizing the
    summed inner products is solved exactly.
    """
    if not reference.same_layout(candidate):
        raise ShapeError("reference and candidate layouts differ")
    ref_layers = list(reference.weights_and_biases())
    cand_layers = list(candidate.weights_and_biases())
    perms = []
    upstream = None
    for layer in range(spec.num_hidden_layers):
        w_ref, b_ref = ref_layers[layer]
        w_cand, b_cand = cand_layers[layer]
        if upstream is not None:
            w_cand = w_cand[upstream, :]
        ref_units = np.vstack([w_ref, b_ref[None, :]]).T
        cand_units = np.vstack([w_cand, b_cand[None, :]]).T
        similarity = ref_units @ cand_units.T
        perm = hungarian(-similarity)
        perms.append(perm)
        upstream = perm
    pmap = PermutationMap(tuple(perms))
    return pmap, apply_permutation(candidate, spec, pmap)


def average_aligned(reference: ParameterVector, candidate: ParameterVector, spec: ModelSpec) -> ParameterVector:
    _, aligned = align_permutations(reference, candidate, spec)
    return average_naive([reference, aligned])


# ---------------------------------------------------------------------------
# fine-tuning


def replace_head(params: ParameterVector, spec: ModelSpec, num_classes: int, seed: int) -> tuple[ParameterVector, ModelSpec]:
    """Fresh final layer with ``num_classes`` outputs; all other layers are copied unchanged."""
    new_spec = replace(spec, output_dim=num_classes)
    tensors = params.tensors()
    fan_in = spec.layer_dims[-1][0]
    w, b = kaiming_uniform(np.random.default_rng(seed), fan_in, num_classes)
    return flatten(tensors[:-2] + [w, b], layout_for(new_spec)), new_spec


def finetune(params: ParameterVector, spec: ModelSpec, target: DataPair, config: TrainConfig,
             reinit_head: bool = True, head_seed: int = 0) -> tuple[RunRecord, ModelSpec]:
    if target.train.input_dim != spec.input_dim:
        raise ShapeError(f"target has {target.train.input_dim} inputs, model expects {spec.input_dim}")
    if reinit_head:
        params, spec = replace_head(params, spec, target.train.num_classes, head_seed)
    elif target.train.num_classes != spec.output_dim:
        raise ValueError(f"target has {target.train.num_classes} classes, model has {spec.output_dim}; "
                         "set reinit_head to transfer across class counts")
    return train(spec, target, config, init=params), spec


def transfer_target(dataset: DatasetSpec, rotation: float = math.pi / 6, seed_offset: int = 1) -> DatasetSpec:
    """The source dataset rotated, drawn with fresh samples."""
    return replace(dataset, rotation=dataset.rotation + rotation, seed=dataset.seed + seed_offset)


# ---------------------------------------------------------------------------
# grid evaluation


DEFAULT_OPTIONS = {
    "base": {},
    "prune": {"sparsity": 0.5},
    "ensemble": {},
    "avg_naive": {},
    "avg_aligned": {},
    "avg_epochs": {"last_k": 3},
    "interpolate": {"alpha": 0.5, "back": 1},
    "finetune": {"rotation": math.pi / 6, "epochs": 10, "peak_lr": 0.02, "batch_size": 16, "reinit_head": True,
                 "head_seed": 0},
}


@dataclass
class DownstreamRecord:
    cell: str
    method: str
    params: dict
    test_acc: float
    delta_vs_base: float
    values: list[float]

    def to_dict(self) -> dict:
        return {"cell": self.cell, "method": self.method, "params": self.params, "test_acc": self.test_acc,
                "delta_vs_base": self.delta_vs_base, "values": self.values}


def resolve_options(method: str, options: dict | None) -> dict:
    if method not in METHODS:
        raise ValueError(f"unknown downstream method {method!r}; known: {', '.join(METHODS)}")
    merged = dict(DEFAULT_OPTIONS[method])
    for k, v in (options or {}).items():
        if k not in merged:
            raise ValueError(f"{method}: unknown option {k!r}")
        merged[k] = v
    return merged


def _cell_values(manifest: ZooManifest, width: int, batch_size: int, method: str, opts: dict) -> list[float]:
    entries = [e for e in manifest.entries_for(width, batch_size) if e.status == "done"]
    if len(entries) != len(manifest.entries_for(width, batch_size)):
        raise RuntimeError("cell has unfinished seeds")
    grid = manifest.grid
    test = grid.dataset.build().test
    keys = [e.cell.key for e in entries]
    spec = manifest.load_run(keys[0])[0]
    finals = [manifest.load_params(k) for k in keys]

    def acc(p: ParameterVector, s: ModelSpec = spec, data: Dataset = test) -> float:
        return evaluate(p, s, data)[1]

    if method == "base":
        return [acc(p) for p in finals]
    if method == "prune":
        return [acc(prune_magnitude(p, opts["sparsity"])) for p in finals]
    if method == "ensemble":
        return [ensemble_accuracy(finals, spec, test)]
    if method in ("avg_naive", "avg_aligned"):
        if len(finals) < 2:
            raise RuntimeError("pairwise method needs at least two seeds")
        out = []
        for i, j in itertools.combinations(range(len(finals)), 2):
            if method == "avg_naive":
                merged = average_naive([finals[i], finals[j]])
            else:
                merged = average_aligned(finals[i], finals[j], spec)
            out.append(acc(merged))
        return out
    if method in ("avg_epochs", "interpolate"):
        out = []
        for k in keys:
            epochs = manifest.checkpoint_epochs(k)
            if method == "avg_epochs":
                merged = average_epochs([manifest.load_params(k, ep) for ep in epochs], opts["last_k"])
            else:
                if len(epochs) <= opts["back"]:
                    raise RuntimeError(f"{k}: not enough checkpoints to look back {opts['back']}")
                earlier = manifest.load_params(k, epochs[-1 - opts["back"]])
                merged = interpolate(earlier, manifest.load_params(k), opts["alpha"])
            out.append(acc(merged))
        return out
    if method == "finetune":
        target_spec = transfer_target(grid.dataset, opts["rotation"])
        target = target_spec.build()
        out = []
        for k, p in zip(keys, finals):
            _, cfg, _ = manifest.load_run(k)
            config = replace(cfg, epochs=opts["epochs"], peak_lr=opts["peak_lr"], batch_size=opts["batch_size"],
                             checkpoint_every=max(1, opts["epochs"]))
            run, new_spec = finetune(p, spec, target, config, opts["reinit_head"], opts["head_seed"])
            out.append(run.final.test_acc)
        return out
    raise ValueError(method)


def _cell_job(root: str, width: int, batch_size: int, method: str, opts: dict) -> tuple[list[float], str | None]:
    with threadpool_limits(limits=1):
        manifest = ZooManifest.load(root)
        try:
            return _cell_values(manifest, width, batch_size, method, opts), None
        except (RuntimeError, ValueError, FloatingPointError, OSError) as exc:
            return [], f"{type(exc).__name__}: {exc}"


def downstream_grid(manifest: ZooManifest, method: str, options: dict | None = None, workers: int = 1,
                    write: bool = True) -> GridTable:
    """Apply one method to every (width, batch) configuration and aggregate over seeds.

    Per-cell failures become NaN entries and are listed in the JSON report.
    """
    opts = resolve_options(method, options)
    grid = manifest.grid
    configs = [(w, b) for w in grid.widths for b in grid.batch_sizes]
    root = str(manifest.root)
    args = [(root, w, b, method, opts) for w, b in configs]
    if workers > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell_job, *zip(*args)))
    else:
        results = [_cell_job(*a) for a in args]
    if method != "base":
        base_args = [(root, w, b, "base", {}) for w, b in configs]
        base = [_cell_job(*a)[0] for a in base_args]
    else:
        base = [r[0] for r in results]
    values = np.full((len(grid.widths), len(grid.batch_sizes)), np.nan)
    records, failures = [], {}
    for k, ((w, b), (vals, err)) in enumerate(zip(configs, results)):
        key = f"w{w}_bs{b}"
        if err is not None or not vals:
            failures[key] = err or "no values"
            continue
        mean = float(np.mean(vals))
        values[grid.widths.index(w), grid.batch_sizes.index(b)] = mean
        base_mean = float(np.mean(base[k])) if base[k] else math.nan
        records.append(DownstreamRecord(key, method, opts, mean, mean - base_mean, vals))
    table = GridTable(method, grid.widths, grid.batch_sizes, values)
    if write:
        write_json(Path(root) / "downstream" / f"{method}.json", {
            "method": method, "params": opts, "cells": [r.to_dict() for r in records], "failed": failures,
            "base": "seed-mean accuracy of the stored final checkpoints",
        })
    return table

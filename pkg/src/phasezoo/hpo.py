"""One-step hyperparameter tuning on a trained grid: random search vs phase-aware moves.

Gains are read from the seed-mean test-accuracy table, so an experiment is an
exact lookup and needs no retraining.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .phase import PhaseLabel, PhaseThresholds, phase_grid
from .zoo import GridTable, ZooManifest, collect_grid, write_json

MAX_MAGNITUDE = 5


class ActionKind(enum.Enum):
    INCREASE_WIDTH = "increase_width"
    INCREASE_BATCH = "increase_batch"
    DECREASE_BATCH = "decrease_batch"
    NONE = "none"


SEARCH_KINDS = (ActionKind.INCREASE_WIDTH, ActionKind.INCREASE_BATCH, ActionKind.DECREASE_BATCH)

PHASE_RULES = {
    PhaseLabel.I: ActionKind.INCREASE_WIDTH,
    PhaseLabel.III: ActionKind.INCREASE_WIDTH,
    PhaseLabel.II: ActionKind.INCREASE_BATCH,
    PhaseLabel.IV_A: ActionKind.DECREASE_BATCH,
    PhaseLabel.IV_B: ActionKind.NONE,
}


@dataclass(frozen=True)
class TuningAction:
    kind: ActionKind
    magnitude: int = 0

    def __post_init__(self):
        if self.kind is ActionKind.NONE:
            return
        if not 1 <= self.magnitude <= MAX_MAGNITUDE:
            raise ValueError(f"magnitude must lie in 1..{MAX_MAGNITUDE}, got {self.magnitude}")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "magnitude": self.magnitude}


class _Axes(Protocol):
    widths: Sequence[int]
    batch_sizes: Sequence[int]


# Both policies draw the magnitude first, so identically seeded generators give
# them the same magnitude (common random numbers across the paired policies).


def random_action(rng: np.random.Generator) -> TuningAction:
    magnitude = int(rng.integers(1, MAX_MAGNITUDE + 1))
    return TuningAction(SEARCH_KINDS[int(rng.integers(len(SEARCH_KINDS)))], magnitude)


def phase_action(phase: PhaseLabel, rng: np.random.Generator) -> TuningAction:
    magnitude = int(rng.integers(1, MAX_MAGNITUDE + 1))
    kind = PHASE_RULES[phase]
    return TuningAction(kind, 0 if kind is ActionKind.NONE else magnitude)


def apply_action(cell: tuple[int, int], action: TuningAction, grid: _Axes) -> tuple[int, int]:
    """Move a (width, batch_size) configuration along one grid axis, clamping at the edges."""
    width, batch = cell
    widths, batches = list(grid.widths), list(grid.batch_sizes)
    if action.kind is ActionKind.INCREASE_WIDTH:
        width = widths[min(widths.index(width) + action.magnitude, len(widths) - 1)]
    elif action.kind is ActionKind.INCREASE_BATCH:
        batch = batches[min(batches.index(batch) + action.magnitude, len(batches) - 1)]
    elif action.kind is ActionKind.DECREASE_BATCH:
        batch = batches[max(batches.index(batch) - action.magnitude, 0)]
    return width, batch


@dataclass
class HpoReport:
    policy: str
    mean_gain: float
    std_gain: float
    trials: int
    per_trial: list[dict] = field(default_factory=list)
    skipped: int = 0

    @classmethod
    def from_trials(cls, policy: str, per_trial: list[dict], skipped: int = 0) -> "HpoReport":
        gains = np.array([t["gain"] for t in per_trial], dtype=float)
        if gains.size == 0:
            raise ValueError(f"{policy}: no usable trials ({skipped} skipped)")
        return cls(policy, float(gains.mean()), float(gains.std()), int(gains.size), per_trial, skipped)

    def to_dict(self) -> dict:
        return {"policy": self.policy, "mean_gain": self.mean_gain, "std_gain": self.std_gain,
                "trials": self.trials, "skipped": self.skipped, "per_trial": self.per_trial}


def _phase_at(phases: GridTable, cell: tuple[int, int]) -> PhaseLabel | None:
    token = phases.at(*cell)
    return None if token is None else PhaseLabel.parse(token)


def _acc_at(acc: GridTable, cell: tuple[int, int]) -> float:
    return float(acc.at(*cell))


def hpo_on_tables(acc: GridTable, phases: GridTable, trials: int = 50, seed: int = 0,
                  paired: bool = True) -> tuple[HpoReport, HpoReport]:
    """Run both policies for ``trials`` draws of a uniformly chosen start configuration.

    Each trial gets its own seed substream. With ``paired`` both policies start
    from the same configuration; otherwise the phase-aware policy draws its own.
    Magnitudes are shared between the policies in either mode.
    A trial is skipped (and counted) when its start or end configuration has no
    phase label or no finite accuracy.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    cells = [(w, b) for w in acc.widths for b in acc.batch_sizes]
    streams = np.random.SeedSequence(seed).spawn(trials)
    out: dict[str, list[dict]] = {"random": [], "phase_aware": []}
    skipped = {"random": 0, "phase_aware": 0}
    for k, ss in enumerate(streams):
        start_ss, action_ss, unpaired_ss = ss.spawn(3)
        start = cells[int(np.random.default_rng(start_ss).integers(len(cells)))]
        phase_start = start if paired else cells[int(np.random.default_rng(unpaired_ss).integers(len(cells)))]
        for policy, origin in (("random", start), ("phase_aware", phase_start)):
            label = _phase_at(phases, origin)
            if label is None:
                skipped[policy] += 1
                continue
            if policy == "random":
                action = random_action(np.random.default_rng(action_ss))
            else:
                action = phase_action(label, np.random.default_rng(action_ss))
            end = apply_action(origin, action, acc)
            before, after = _acc_at(acc, origin), _acc_at(acc, end)
            if not (np.isfinite(before) and np.isfinite(after)):
                skipped[policy] += 1
                continue
            out[policy].append({"trial": k, "start": list(origin), "phase": label.token,
                                "action": action.to_dict(), "end": list(end), "gain": after - before})
    return (HpoReport.from_trials("random", out["random"], skipped["random"]),
            HpoReport.from_trials("phase_aware", out["phase_aware"], skipped["phase_aware"]))


def expected_gains(acc: GridTable, phases: GridTable) -> tuple[float, float]:
    """Exact expected one-step gain of each policy under uniform start cells and magnitudes.

    Cells without a phase label or finite accuracy are excluded from the start
    distribution, matching the skipping rule of the sampled experiment.
    """
    rand, aware = [], []
    for w in acc.widths:
        for b in acc.batch_sizes:
            label = _phase_at(phases, (w, b))
            base = _acc_at(acc, (w, b))
            if label is None or not np.isfinite(base):
                continue
            for m in range(1, MAX_MAGNITUDE + 1):
                for kind in SEARCH_KINDS:
                    rand.append(_acc_at(acc, apply_action((w, b), TuningAction(kind, m), acc)) - base)
                kind = PHASE_RULES[label]
                action = TuningAction(kind, 0 if kind is ActionKind.NONE else m)
                aware.append(_acc_at(acc, apply_action((w, b), action, acc)) - base)
    return float(np.mean(rand)), float(np.mean(aware))


def run_hpo_experiment(manifest: ZooManifest, thresholds: PhaseThresholds, trials: int = 50, seed: int = 0,
                       paired: bool = True, write: bool = True) -> tuple[HpoReport, HpoReport]:
    acc = collect_grid(manifest, "test_acc")
    phases = phase_grid(manifest, thresholds).table
    random_report, aware_report = hpo_on_tables(acc, phases, trials=trials, seed=seed, paired=paired)
    if write:
        exp_random, exp_aware = expected_gains(acc, phases)
        write_json(Path(manifest.root) / "hpo_report.json", {
            "protocol": {"trials": trials, "seed": seed, "paired_start_cells": paired,
                         "start_distribution": "uniform", "magnitude_range": [1, MAX_MAGNITUDE],
                         "gain": "seed-mean test_acc(end) - test_acc(start)"},
            "thresholds": thresholds.to_dict(),
            "random": random_report.to_dict(),
            "phase_aware": aware_report.to_dict(),
            "expected": {"random": exp_random, "phase_aware": exp_aware},
        })
    return random_report, aware_report

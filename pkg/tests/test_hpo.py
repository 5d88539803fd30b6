from __future__ import annotations

from collections import Counter

import numpy as np
import pytest

from phasezoo.hpo import (MAX_MAGNITUDE, SEARCH_KINDS, ActionKind, TuningAction, apply_action, expected_gains,
                          hpo_on_tables, phase_action, random_action)
from phasezoo.phase import PhaseLabel
from phasezoo.zoo import GridTable

WIDTHS = (4, 8, 16, 32, 64)
BATCHES = (2, 4, 8, 16, 32)


def _tables(acc: np.ndarray, tokens: list[list[str | None]]):
    return (GridTable("test_acc", WIDTHS, BATCHES, np.asarray(acc, dtype=float)),
            GridTable("phase", WIDTHS, BATCHES, np.array(tokens, dtype=object)))


def monotone_grid():
    """Accuracy rises with width and peaks at the middle batch size; labels follow the best move."""
    i, j = np.meshgrid(np.arange(5), np.arange(5), indexing="ij")
    acc = 0.5 + 0.08 * i - 0.02 * np.abs(j - 2)
    tokens = [["I"] * 5 for _ in range(4)] + [["II", "II", "IVB", "IVA", "IVA"]]
    return _tables(acc, tokens)


def test_action_validation():
    with pytest.raises(ValueError):
        TuningAction(ActionKind.INCREASE_WIDTH, 0)
    with pytest.raises(ValueError):
        TuningAction(ActionKind.DECREASE_BATCH, MAX_MAGNITUDE + 1)
    assert TuningAction(ActionKind.NONE).magnitude == 0


def test_random_action_frequencies():
    rng = np.random.default_rng(0)
    draws = [random_action(rng) for _ in range(10_000)]
    kinds = Counter(a.kind for a in draws)
    for kind in SEARCH_KINDS:
        assert kinds[kind] / len(draws) == pytest.approx(1 / 3, abs=0.02)
    mags = Counter(a.magnitude for a in draws)
    assert set(mags) == set(range(1, MAX_MAGNITUDE + 1))
    for m in mags.values():
        assert m / len(draws) == pytest.approx(1 / MAX_MAGNITUDE, abs=0.02)


def test_phase_rules():
    rng = np.random.default_rng(0)
    assert phase_action(PhaseLabel.I, rng).kind is ActionKind.INCREASE_WIDTH
    assert phase_action(PhaseLabel.III, rng).kind is ActionKind.INCREASE_WIDTH
    assert phase_action(PhaseLabel.II, rng).kind is ActionKind.INCREASE_BATCH
    assert phase_action(PhaseLabel.IV_A, rng).kind is ActionKind.DECREASE_BATCH
    assert phase_action(PhaseLabel.IV_B, rng) == TuningAction(ActionKind.NONE, 0)


def test_policies_share_magnitude_under_same_seed():
    for s in range(20):
        a = random_action(np.random.default_rng(s))
        b = phase_action(PhaseLabel.I, np.random.default_rng(s))
        assert a.magnitude == b.magnitude


def test_apply_action_moves_and_clamps():
    acc, _ = monotone_grid()
    assert apply_action((4, 8), TuningAction(ActionKind.INCREASE_WIDTH, 2), acc) == (16, 8)
    assert apply_action((32, 8), TuningAction(ActionKind.INCREASE_WIDTH, 5), acc) == (64, 8)
    assert apply_action((4, 16), TuningAction(ActionKind.INCREASE_BATCH, 3), acc) == (4, 32)
    assert apply_action((4, 4), TuningAction(ActionKind.DECREASE_BATCH, 4), acc) == (4, 2)
    assert apply_action((8, 4), TuningAction(ActionKind.NONE), acc) == (8, 4)


def test_monotone_grid_strict_exhaustive():
    acc, phases = monotone_grid()
    rand, aware = expected_gains(acc, phases)
    assert aware > rand
    # independent enumeration of the phase-aware expectation
    total = 0.0
    for i in range(5):
        for j in range(5):
            for m in range(1, 6):
                if i < 4:
                    total += acc.values[min(i + m, 4), j] - acc.values[i, j]
                elif j < 2:
                    total += acc.values[i, min(j + m, 4)] - acc.values[i, j]
                elif j > 2:
                    total += acc.values[i, max(j - m, 0)] - acc.values[i, j]
    assert aware == pytest.approx(total / 125, abs=1e-12)


def test_sampled_gains_converge_to_expectation():
    acc, phases = monotone_grid()
    rand, aware = expected_gains(acc, phases)
    r, a = hpo_on_tables(acc, phases, trials=20_000, seed=3)
    assert r.mean_gain == pytest.approx(rand, abs=4 * r.std_gain / np.sqrt(r.trials))
    assert a.mean_gain == pytest.approx(aware, abs=4 * a.std_gain / np.sqrt(a.trials))


def test_constant_grid_gives_zero_gain():
    acc, phases = _tables(np.full((5, 5), 0.7), [["I", "II", "III", "IVA", "IVB"]] * 5)
    r, a = hpo_on_tables(acc, phases, trials=30, seed=1)
    assert (r.mean_gain, a.mean_gain, r.std_gain, a.std_gain) == (0.0, 0.0, 0.0, 0.0)


def test_paired_trials_share_start_and_are_deterministic():
    acc, phases = monotone_grid()
    r1, a1 = hpo_on_tables(acc, phases, trials=50, seed=0)
    r2, a2 = hpo_on_tables(acc, phases, trials=50, seed=0)
    assert r1.to_dict() == r2.to_dict() and a1.to_dict() == a2.to_dict()
    assert [t["start"] for t in r1.per_trial] == [t["start"] for t in a1.per_trial]
    ru, au = hpo_on_tables(acc, phases, trials=50, seed=0, paired=False)
    assert [t["start"] for t in ru.per_trial] == [t["start"] for t in r1.per_trial]
    assert [t["start"] for t in au.per_trial] != [t["start"] for t in a1.per_trial]


def test_std_is_population_std():
    acc, phases = monotone_grid()
    r, _ = hpo_on_tables(acc, phases, trials=40, seed=2)
    gains = np.array([t["gain"] for t in r.per_trial])
    assert r.std_gain == pytest.approx(gains.std(ddof=0))


def test_unlabeled_starts_are_skipped():
    acc, phases = monotone_grid()
    phases.values[:, :] = None
    with pytest.raises(ValueError, match="no usable trials"):
        hpo_on_tables(acc, phases, trials=5, seed=0)
    phases.values[0, 0] = "I"
    r, a = hpo_on_tables(acc, phases, trials=200, seed=0)
    assert r.skipped == a.skipped and r.trials + r.skipped == 200
    assert all(t["start"] == [4, 2] for t in a.per_trial)

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TRUE_THRESHOLDS as TRUE
from conftest import phase_record as _record
from conftest import separable_records
from phasezoo.phase import (CoverageError, PhaseLabel, PhaseThresholds, accuracy, classify, fit_thresholds,
                            phase_grid, provisional_thresholds, records_from_manifest)


def test_hand_example_is_phase_three():
    assert classify(_record(0.1, -0.2, 0.9, 10.0), TRUE) is PhaseLabel.III


@pytest.mark.parametrize("record,label", [
    ((0.6, -0.2, 0.9, 10.0), PhaseLabel.I),
    ((0.6, 0.0, 0.9, 10.0), PhaseLabel.II),
    ((0.1, 0.0, 0.9, 10.0), PhaseLabel.IV_B),
    ((0.1, 0.0, 0.7, 10.0), PhaseLabel.IV_A),
    ((0.1, 0.0, 0.9, 200.0), PhaseLabel.IV_A),
    ((0.5, -0.05, 0.8, 100.0), PhaseLabel.IV_B),  # every comparison at its boundary
])
def test_tree_branches(record, label):
    assert classify(_record(*record), TRUE) is label


def test_label_tokens_parse():
    assert [p.token for p in PhaseLabel] == ["I", "II", "III", "IVA", "IVB"]
    assert PhaseLabel.parse("iv-b") is PhaseLabel.IV_B
    with pytest.raises(ValueError):
        PhaseLabel.parse("V")


def test_threshold_validation_and_roundtrip(tmp_path):
    with pytest.raises(ValueError):
        PhaseThresholds(0.5, 0.1, 0.5)
    with pytest.raises(ValueError):
        PhaseThresholds(0.5, -0.1, 1.5)
    t = PhaseThresholds(0.5, -0.1, 0.7, accuracy=0.9, low_confidence=False)
    t.save(tmp_path / "t.json")
    loaded = PhaseThresholds.load(tmp_path / "t.json")
    assert loaded == t and math.isinf(loaded.tau_trace)


@settings(max_examples=60, deadline=None)
@given(loss=st.floats(1e-4, 5), mc=st.floats(-1, 1), cka=st.floats(0, 1), trace=st.floats(0, 1e3),
       bump=st.floats(0.0, 2.0))
def test_loss_monotonicity(loss, mc, cka, trace, bump):
    # raising train loss can only move a model from the low-loss phases into I or II, never back
    low = classify(_record(loss, mc, cka, trace), TRUE)
    high = classify(_record(loss + bump, mc, cka, trace), TRUE)
    if low in (PhaseLabel.I, PhaseLabel.II):
        assert high is low
    if high in (PhaseLabel.III, PhaseLabel.IV_A, PhaseLabel.IV_B):
        assert low is high


@settings(max_examples=60, deadline=None)
@given(loss=st.floats(1e-4, 5), mc=st.floats(-1, 1), cka=st.floats(0, 1), trace=st.floats(0, 1e3),
       scale=st.floats(0.1, 10.0))
def test_scaling_loss_and_threshold_together_is_invariant(loss, mc, cka, trace, scale):
    scaled = PhaseThresholds(TRUE.tau_loss * scale, TRUE.tau_mc, TRUE.tau_cka, TRUE.tau_trace * scale)
    assert classify(_record(loss, mc, cka, trace), TRUE) is \
        classify(_record(loss * scale, mc, cka, trace * scale), scaled)


def test_coverage_error_lists_missing_phases():
    records, labels = separable_records(0)
    keep = [i for i, l in enumerate(labels) if l not in (PhaseLabel.III, PhaseLabel.IV_B)]
    with pytest.raises(CoverageError) as info:
        fit_thresholds([records[i] for i in keep], [labels[i] for i in keep])
    assert set(info.value.missing) == {PhaseLabel.III, PhaseLabel.IV_B}


@pytest.mark.parametrize("seed", range(5))
def test_fit_separable_reaches_full_accuracy(seed):
    records, labels = separable_records(seed)
    fitted = fit_thresholds(records, labels)
    assert fitted.accuracy == 1.0 and not fitted.low_confidence
    assert accuracy(records, labels, fitted) == 1.0


def test_fit_permuted_labels_low_confidence():
    records, labels = separable_records(0)
    shuffled = [labels[i] for i in np.random.default_rng(7).permutation(len(labels))]
    fitted = fit_thresholds(records, shuffled)
    assert fitted.low_confidence and fitted.accuracy < 0.5


def test_fit_picks_plateau_midpoint():
    records, labels = separable_records(1)
    fitted = fit_thresholds(records, labels)
    losses = np.array([r.train_loss for r in records])
    gap_lo = losses[losses < 0.5].max()
    gap_hi = losses[losses > 0.5].min()
    assert fitted.tau_loss == pytest.approx(0.5 * (gap_lo + gap_hi))


def test_provisional_thresholds_split_loss_modes():
    records, labels = separable_records(2)
    t = provisional_thresholds(records)
    assert t.provisional and 0.4 < t.tau_loss < 0.7
    assert -1.0 <= t.tau_mc <= 0.0


def test_zoo_records_and_grid(tiny_zoo):
    per_model = records_from_manifest(tiny_zoo, "model")
    per_config = records_from_manifest(tiny_zoo, "config")
    assert len(per_model) == 8 and len(per_config) == 4
    first = [r for r in per_model if r.cell.startswith("w3_bs8_")]
    assert per_config[0].train_loss == pytest.approx(np.mean([r.train_loss for r in first]))
    grid = phase_grid(tiny_zoo, provisional_thresholds(per_config))
    assert grid.unlabeled == []
    assert {v for v in grid.table.values.ravel()} <= {p.token for p in PhaseLabel}

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phasezoo.nn import ModelSpec, build_model, flatten, layout_for
from phasezoo.probe import (MIN_CELLS, STATISTICS, SampleSizeError, UndefinedR2Error, export_features_csv,
                            fit_ridge, probe_arrays, probe_dataset, r2_score, weight_features)


def test_quantile_features_hand_example():
    spec = ModelSpec(5, 1, 1, 2)
    params = flatten([np.arange(1.0, 6.0).reshape(5, 1), np.array([0.0]), np.array([[1.0, -1.0]]),
                      np.array([0.5, 0.5])], layout_for(spec))
    feats = weight_features(params)
    got = dict(zip(feats.names, feats.values))
    # linear interpolation on {1, ..., 5}: the 20th percentile sits 0.8 of the way from 1 to 2
    assert got["layer0.weight.q20"] == pytest.approx(1.8)
    assert got["layer0.weight.q40"] == pytest.approx(2.6)
    assert got["layer0.weight.q80"] == pytest.approx(4.2)
    assert got["layer0.weight.mean"] == 3.0 and got["layer0.weight.std"] == pytest.approx(np.sqrt(2.0))
    assert (got["layer0.weight.min"], got["layer0.weight.max"]) == (1.0, 5.0)
    assert got["layer1.bias.std"] == 0.0


def test_feature_count():
    spec = ModelSpec(2, 8, 2, 3)
    feats = weight_features(build_model(spec))
    assert feats.values.shape == (3 * 2 * len(STATISTICS),) == (len(feats.names),)


def test_ridge_recovers_exact_line():
    x = np.linspace(-2, 3, 20)[:, None]
    model = fit_ridge(x, 2 * x[:, 0] + 1, 0.0)
    assert model.coef[0] == pytest.approx(2.0) and model.intercept == pytest.approx(1.0)


def test_ridge_large_lambda_predicts_mean():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(30, 4)), rng.normal(size=30)
    model = fit_ridge(x, y, 1e12)
    np.testing.assert_allclose(model.predict(x), y.mean(), atol=1e-9)


def test_ridge_drops_constant_columns_with_warning():
    rng = np.random.default_rng(1)
    x = np.column_stack([rng.normal(size=15), np.full(15, 3.0)])
    with pytest.warns(RuntimeWarning, match="zero-variance"):
        model = fit_ridge(x, x[:, 0], 0.1)
    assert model.kept.tolist() == [True, False] and model.coef[1] == 0.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32), lam=st.floats(1e-4, 10.0), copies=st.integers(2, 4))
def test_ridge_invariant_to_row_duplication(seed, lam, copies):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(12, 3)), rng.normal(size=12)
    once = fit_ridge(x, y, lam)
    many = fit_ridge(np.tile(x, (copies, 1)), np.tile(y, copies), lam)
    np.testing.assert_allclose(many.coef, once.coef, rtol=1e-8, atol=1e-10)
    assert many.intercept == pytest.approx(once.intercept, rel=1e-8, abs=1e-10)


def test_r2_cases():
    y = np.array([1.0, 2.0, 3.0])
    assert r2_score(y, y) == 1.0
    assert r2_score(np.full(3, 2.0), y) == 0.0
    with pytest.raises(UndefinedR2Error):
        r2_score(y, np.full(3, 5.0))
    with pytest.raises(ValueError):
        r2_score(y[:1], y[:1])


def _synthetic(n_groups=20, per_group=3, seed=0, noise=0.05):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_groups, 5))
    x = np.repeat(centers, per_group, axis=0) + 0.01 * rng.normal(size=(n_groups * per_group, 5))
    y = x @ np.array([1.0, -2.0, 0.5, 0.0, 0.0]) + noise * rng.normal(size=len(x))
    groups = [f"g{i}" for i in range(n_groups) for _ in range(per_group)]
    return x, y, groups


def test_probe_on_linear_signal():
    x, y, groups = _synthetic()
    report = probe_arrays(x, y, groups)
    assert report.r2_test > 0.95
    assert report.n_train_cells + report.n_test_cells == 20 and report.n_test_cells == 4
    assert report.to_dict()["split"] == {"train_fraction": 0.8, "seed": 0}


def test_probe_permutation_control_near_zero():
    x, y, groups = _synthetic(n_groups=40)
    scores = [probe_arrays(x, y, groups, permutation_seed=s).r2_test for s in range(20)]
    assert np.mean(scores) < 0.05


def test_probe_split_keeps_groups_together():
    x, y, groups = _synthetic()
    report = probe_arrays(x, y, groups, split_seed=3)
    assert report.n_rows == 60 and report.n_test_cells * 3 + report.n_train_cells * 3 == 60


def test_probe_needs_enough_cells():
    x, y, groups = _synthetic(n_groups=MIN_CELLS - 1)
    with pytest.raises(SampleSizeError):
        probe_arrays(x, y, groups)


def test_probe_dataset_from_zoo(tiny_zoo, tmp_path):
    x, y, groups, names = probe_dataset(tiny_zoo, "test_acc")
    assert x.shape == (8, len(names)) and len(set(groups)) == 4
    with pytest.raises(ValueError):
        probe_dataset(tiny_zoo, "loss")
    path = export_features_csv(tiny_zoo, tmp_path / "features.csv")
    lines = path.read_text().splitlines()
    assert len(lines) == 9 and lines[0].startswith("cell,layer0.weight.mean")

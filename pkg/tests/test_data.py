from __future__ import annotations

import numpy as np
import pytest

from phasezoo.data import (DatasetSpec, IngestionError, load_csv, make_gaussian_mixture, make_spirals,
                           write_csv)


def test_spirals_balanced_and_seeded():
    a = make_spirals(100, 3, 0.2, seed=5)
    assert np.bincount(a.labels).tolist() == [34, 33, 33]
    assert a.equals(make_spirals(100, 3, 0.2, seed=5))
    assert not a.equals(make_spirals(100, 3, 0.2, seed=6))
    radii = np.linalg.norm(a.inputs, axis=1)
    assert radii.min() >= 0.05 and radii.max() <= 1.0


def test_rotation_rotates_every_point():
    base = make_spirals(30, 3, 0.1, seed=1)
    turned = make_spirals(30, 3, 0.1, seed=1, rotation=np.pi / 2)
    rot = np.array([[0.0, 1.0], [-1.0, 0.0]])  # row-vector form of a +90 degree rotation
    np.testing.assert_allclose(base.inputs @ rot, turned.inputs, atol=1e-12)


def test_gaussian_mixture_neighbour_spacing():
    d = make_gaussian_mixture(3000, 4, separation=3.0, seed=0)
    means = np.array([d.inputs[d.labels == k].mean(axis=0) for k in range(4)])
    gaps = [np.linalg.norm(means[k] - means[(k + 1) % 4]) for k in range(4)]
    np.testing.assert_allclose(gaps, 3.0, atol=0.15)


def test_invalid_sizes():
    with pytest.raises(ValueError):
        make_spirals(2, 3, 0.1, seed=0)
    with pytest.raises(ValueError):
        make_spirals(10, 1, 0.1, seed=0)


def test_csv_roundtrip(tmp_path):
    d = make_spirals(20, 3, 0.2, seed=2)
    write_csv(d, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv", 3)
    assert back.equals(d)


@pytest.mark.parametrize("text,row", [
    ("a,b,label\n1,2,0\n", 1),
    ("x0,x1,label\n1,2,0\n1,oops,1\n", 3),
    ("x0,x1,label\n1,2\n", 2),
    ("x0,x1,label\n1,2,-1\n", 2),
    ("x0,x1,label\n1,2,0\n1,2,7\n", 3),
])
def test_csv_errors_carry_row(tmp_path, text, row):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(IngestionError) as info:
        load_csv(path, num_classes=3)
    assert info.value.row == row


def test_dataset_spec_train_and_test_differ():
    pair = DatasetSpec(n_train=50, n_test=40).build()
    assert len(pair.train) == 50 and len(pair.test) == 40
    assert not np.array_equal(pair.train.inputs[:40], pair.test.inputs)
    assert DatasetSpec.from_dict(DatasetSpec(noise=0.3).to_dict()) == DatasetSpec(noise=0.3)

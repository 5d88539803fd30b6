"""Seeded synthetic classification datasets and CSV ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class IngestionError(ValueError):
    """A dataset file could not be parsed."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    generator: str = "spirals"
    seed: int = 0

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError(f"inputs {x.shape} and labels {y.shape} disagree")
        if x.shape[0] == 0:
            raise ValueError("dataset must contain at least one sample")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, index) -> "Dataset":
        return Dataset(self.inputs[index], self.labels[index], self.num_classes, self.split, self.generator, self.seed)

    def equals(self, other: "Dataset") -> bool:
        return (self.num_classes == other.num_classes and np.array_equal(self.inputs, other.inputs)
                and np.array_equal(self.labels, other.labels))


@dataclass(frozen=True)
class DataPair:
    train: Dataset
    test: Dataset


def _class_counts(n: int, classes: int) -> list[int]:
    base, extra = divmod(n, classes)
    return [base + (1 if k < extra else 0) for k in range(classes)]


def _check_sizes(n: int, classes: int) -> None:
    if classes < 2 or n < classes:
        raise ValueError(f"need n >= classes >= 2, got n={n}, classes={classes}")


def make_spirals(n: int, classes: int, noise: float, seed: int, *, turns: float = 1.0,
                 rotation: float = 0.0, split: str = "train") -> Dataset:
    """Interleaved 2-D spiral arms, one arm per class.

    ``noise`` is the std of the Gaussian jitter added to the angle, in radians.
    ``rotation`` rotates the whole pattern, which gives a related but shifted task.
    """
    _check_sizes(n, classes)
    if noise < 0:
        raise ValueError("noise must be nonnegative")
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for k, count in enumerate(_class_counts(n, classes)):
        r = rng.uniform(0.05, 1.0, size=count)
        angle = 2 * np.pi * (k / classes + turns * r) + rotation + noise * rng.standard_normal(count)
        xs.append(np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1))
        ys.append(np.full(count, k))
    order = rng.permutation(n)
    return Dataset(np.concatenate(xs)[order], np.concatenate(ys)[order], classes, split, "spirals", seed)


def make_gaussian_mixture(n: int, classes: int, separation: float, seed: int, *, dim: int = 2,
                          split: str = "train") -> Dataset:
    """Unit-variance Gaussian blobs with means on a circle, neighbouring means ``separation`` apart."""
    _check_sizes(n, classes)
    if separation < 0:
        raise ValueError("separation must be nonnegative")
    if dim < 2:
        raise ValueError("dim must be at least 2")
    rng = np.random.default_rng(seed)
    radius = separation / (2 * np.sin(np.pi / classes))
    angles = 2 * np.pi * np.arange(classes) / classes
    means = np.zeros((classes, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    xs, ys = [], []
    for k, count in enumerate(_class_counts(n, classes)):
        xs.append(means[k] + rng.standard_normal((count, dim)))
        ys.append(np.full(count, k))
    order = rng.permutation(n)
    return Dataset(np.concatenate(xs)[order], np.concatenate(ys)[order], classes, split, "gaussian_mixture", seed)


def load_csv(path: str | Path, num_classes: int | None = None, split: str = "train") -> Dataset:
    """Read a ``x0,...,xD,label`` CSV with a header row."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError("empty file", row=1) from None
        header = [h.strip() for h in header]
        if len(header) < 2 or header[-1] != "label" or any(h != f"x{i}" for i, h in enumerate(header[:-1])):
            raise IngestionError(f"header must be x0,...,xD,label; got {','.join(header)}", row=1)
        dim = len(header) - 1
        xs, ys = [], []
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != dim + 1:
                raise IngestionError(f"expected {dim + 1} fields, got {len(row)}", row=row_no)
            try:
                xs.append([float(c) for c in row[:-1]])
            except ValueError as exc:
                raise IngestionError(f"bad float: {exc}", row=row_no) from None
            label = row[-1].strip()
            if not label.isdigit():
                raise IngestionError(f"label must be a nonnegative integer, got {label!r}", row=row_no)
            ys.append(int(label))
    if not ys:
        raise IngestionError("no data rows", row=2)
    y = np.array(ys, dtype=np.int64)
    classes = num_classes if num_classes is not None else int(y.max()) + 1
    if y.max() >= classes:
        bad = int(np.argmax(y >= classes)) + 2
        raise IngestionError(f"label {y.max()} >= num_classes {classes}", row=bad)
    return Dataset(np.array(xs, dtype=np.float64), y, classes, split, "csv", 0)


def write_csv(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(dataset.input_dim)] + ["label"])
        for x, y in zip(dataset.inputs, dataset.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])


@dataclass(frozen=True)
class DatasetSpec:
    """Serializable recipe for a train/test pair."""

    generator: str = "spirals"
    n_train: int = 300
    n_test: int = 300
    classes: int = 3
    noise: float = 0.2
    separation: float = 3.0
    turns: float = 1.0
    rotation: float = 0.0
    seed: int = 0
    train_path: str | None = None
    test_path: str | None = None

    def to_dict(self) -> dict:
        return {
            "generator": self.generator, "n_train": self.n_train, "n_test": self.n_test,
            "classes": self.classes, "noise": self.noise, "separation": self.separation,
            "turns": self.turns, "rotation": self.rotation, "seed": self.seed,
            "train_path": self.train_path, "test_path": self.test_path,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)

    def build(self) -> DataPair:
        if self.generator == "spirals":
            make = lambda n, s, split: make_spirals(n, self.classes, self.noise, s, turns=self.turns,
                                                    rotation=self.rotation, split=split)
        elif self.generator == "gaussian_mixture":
            make = lambda n, s, split: make_gaussian_mixture(n, self.classes, self.separation, s, split=split)
        elif self.generator == "csv":
            if not self.train_path or not self.test_path:
                raise ValueError("csv datasets need train_path and test_path")
            return DataPair(load_csv(self.train_path, self.classes, "train"),
                            load_csv(self.test_path, self.classes, "test"))
        else:
            raise ValueError(f"unknown generator {self.generator!r}")
        # train and test draw from disjoint derived streams
        train_seed, test_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(self.seed).spawn(2))
        return DataPair(make(self.n_train, train_seed, "train"), make(self.n_test, test_seed, "test"))

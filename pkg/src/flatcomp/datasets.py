"""Deterministic synthetic classification tasks.

Feature tasks (``moons``, ``blobs``, ``rings``) yield 2-D real inputs; sequence
tasks (``seq-majority``, ``seq-parity``) yield binary token sequences. Every
split is a pure function of (generator, n, noise, seed, split).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .models import Batch
from .seeding import derive_seed, rng

FEATURE_TASKS = ("moons", "blobs", "rings")
SEQUENCE_TASKS = ("seq-majority", "seq-parity")
GENERATORS = FEATURE_TASKS + SEQUENCE_TASKS
SPLITS = ("train", "val", "test")
PAD_ID = 2

# related task pairs used for ticket transfer
TRANSFER_PAIRS = {"moons": "rings", "rings": "moons",
                  "seq-majority": "seq-parity", "seq-parity": "seq-majority"}


class UnknownTaskError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    generator: str = "moons"
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    noise: float = 0.1
    seed: int = 0
    seq_len: int = 16

    def validate(self) -> None:
        if self.generator not in GENERATORS:
            raise UnknownTaskError(f"unknown generator {self.generator!r}; expected one of {GENERATORS}")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("every split needs n >= 1")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")

    @property
    def is_sequence(self) -> bool:
        return self.generator in SEQUENCE_TASKS

    @property
    def input_dim(self) -> int:
        return self.seq_len if self.is_sequence else 2

    def split_seed(self, split: str) -> int:
        return derive_seed(self.seed, "dataset", self.generator, split)


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    task_id: str
    split: str

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def batch(self) -> Batch:
        return Batch(self.inputs, self.labels)

    def subset(self, idx: np.ndarray) -> Batch:
        return Batch(self.inputs[idx], self.labels[idx])


@dataclass
class TaskData:
    spec: TaskSpec
    train: Dataset
    val: Dataset
    test: Dataset

    def __iter__(self):
        return iter((self.train, self.val, self.test))


def _balanced_labels(n: int) -> np.ndarray:
    y = np.zeros(n, dtype=np.int64)
    y[n // 2 + n % 2:] = 1
    return y


def _moons(n: int, noise: float, gen: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    y = _balanced_labels(n)
    t = gen.uniform(0.0, np.pi, size=n)
    x = np.where(y[:, None] == 0,
                 np.stack([np.cos(t), np.sin(t)], axis=1),
                 np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1))
    if noise > 0:
        x = x + noise * gen.standard_normal(size=x.shape)
    return x, y


def _rings(n: int, noise: float, gen: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    y = _balanced_labels(n)
    t = gen.uniform(0.0, 2 * np.pi, size=n)
    r = np.where(y == 0, 1.0, 0.5)
    x = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
    if noise > 0:
        x = x + noise * gen.standard_normal(size=x.shape)
    return x, y


def _blobs(n: int, noise: float, gen: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    y = _balanced_labels(n)
    centers = np.array([[-1.0, -0.5], [1.0, 0.5]])
    x = centers[y] + noise * gen.standard_normal(size=(n, 2))
    return x, y


def sequence_label(generator: str, seq: np.ndarray) -> int | None:
    """Label of one token sequence; ``None`` when majority is tied."""
    ones = int(np.count_nonzero(seq == 1))
    if generator == "seq-parity":
        return ones % 2
    zeros = seq.shape[0] - ones
    if ones == zeros:
        return None
    return int(ones > zeros)


def _sequences(generator: str, n: int, L: int, gen: np.random.Generator,
               exclude: set[bytes]) -> tuple[np.ndarray, np.ndarray]:
    want = _balanced_labels(n)
    gen.shuffle(want)
    seen = set(exclude)
    out = np.empty((n, L), dtype=np.int64)
    i = 0
    attempts = 0
    while i < n:
        attempts += 1
        if attempts > 200 * n + 10_000:
            raise ValueError(f"{generator}: could not draw {n} distinct sequences of length {L}")
        s = gen.integers(0, 2, size=L)
        if sequence_label(generator, s) != want[i]:
            continue
        key = s.astype(np.uint8).tobytes()
        if key in seen:
            continue
        seen.add(key)
        out[i] = s
        i += 1
    return out, want


def generate(spec: TaskSpec) -> TaskData:
    spec.validate()
    sizes = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    splits: dict[str, Dataset] = {}
    used: set[bytes] = set()
    for split in SPLITS:
        gen = rng(spec.split_seed(split))
        n = sizes[split]
        if spec.generator == "moons":
            x, y = _moons(n, spec.noise, gen)
        elif spec.generator == "rings":
            x, y = _rings(n, spec.noise, gen)
        elif spec.generator == "blobs":
            x, y = _blobs(n, spec.noise, gen)
        else:
            x, y = _sequences(spec.generator, n, spec.seq_len, gen, used)
            used.update(row.astype(np.uint8).tobytes() for row in x)
        if not spec.is_sequence:
            perm = gen.permutation(n)
            x, y = x[perm], y[perm]
        splits[split] = Dataset(x, y, spec.generator, split)
    return TaskData(spec, splits["train"], splits["val"], splits["test"])


def batches(ds: Dataset, batch_size: int, shuffle_seed: int, epoch: int = 0) -> Iterator[Batch]:
    """One epoch of shuffled minibatches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    if n == 0:
        raise ValueError("cannot batch an empty dataset")
    order = rng(derive_seed(shuffle_seed, "epoch", epoch)).permutation(n)
    for start in range(0, n, batch_size):
        yield ds.subset(order[start:start + batch_size])


def dump_csv(ds: Dataset, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x = ds.inputs.reshape(len(ds), -1)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(x.shape[1])] + ["label"])
        for row, label in zip(x, ds.labels):
            w.writerow([repr(float(v)) if ds.inputs.dtype.kind == "f" else int(v) for v in row] + [int(label)])
    return path

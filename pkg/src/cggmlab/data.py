"""Synthetic multimodal tasks with a per-modality informativeness dial.

Classification: every modality holds its own random embedding of the latent
class, scaled by the modality's informativeness, plus isotropic gaussian
noise. Regression: the latent score y ~ U(-3, 3) is written along a random
direction per modality, again scaled and noised.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import Reader, Writer
from .errors import ConfigError, FormatError, ShapeError

DATASET_MAGIC = b"CGGD"
DATASET_VERSION = 1


@dataclass(frozen=True)
class SyntheticSpec:
    task: str = "classification"
    classes: int = 4
    informativeness: tuple = (0.9, 0.3, 0.3)
    feature_dims: tuple = (8, 8, 8)
    n_samples: int = 2000
    train_fraction: float = 0.8
    noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "informativeness", tuple(float(s) for s in self.informativeness))
        object.__setattr__(self, "feature_dims", tuple(int(d) for d in self.feature_dims))
        if self.task not in ("classification", "regression"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.task == "classification" and self.classes < 2:
            raise ConfigError("classification needs at least 2 classes")
        if not self.informativeness:
            raise ConfigError("need at least one modality")
        if len(self.informativeness) != len(self.feature_dims):
            raise ConfigError("informativeness and feature_dims must have one entry per modality")
        if any(not 0.0 <= s <= 1.0 for s in self.informativeness):
            raise ConfigError("informativeness values must lie in [0, 1]")
        if any(d < 1 for d in self.feature_dims):
            raise ConfigError("feature dims must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        n_train = round(self.n_samples * self.train_fraction)
        if n_train < 1 or n_train >= self.n_samples:
            raise ConfigError("both splits must be non-empty")

    @property
    def modalities(self) -> int:
        return len(self.feature_dims)

    @property
    def output_dim(self) -> int:
        return self.classes if self.task == "classification" else 1


@dataclass
class Dataset:
    features: list
    targets: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    spec: SyntheticSpec

    def split(self, name: str) -> np.ndarray:
        if name == "train":
            return self.train_idx
        if name == "test":
            return self.test_idx
        raise ValueError(f"unknown split {name!r}")

    def take(self, idx):
        """(inputs, targets) restricted to the given rows."""
        return [f[idx] for f in self.features], self.targets[idx]


def generate(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    n = spec.n_samples
    if spec.task == "classification":
        protos = [rng.standard_normal((spec.classes, d)) for d in spec.feature_dims]
        labels = rng.integers(0, spec.classes, size=n)
        signal = [p[labels] for p in protos]
        targets = labels.astype(np.float64)
    else:
        dirs = [rng.standard_normal(d) for d in spec.feature_dims]
        targets = rng.uniform(-3.0, 3.0, size=n)
        signal = [np.outer(targets, u) for u in dirs]
    features = []
    for s, sig, d in zip(spec.informativeness, signal, spec.feature_dims):
        features.append(s * sig + spec.noise * rng.standard_normal((n, d)))
    order = rng.permutation(n)
    n_train = round(n * spec.train_fraction)
    return Dataset(features, targets, np.sort(order[:n_train]), np.sort(order[n_train:]), spec)


def batches(dataset: Dataset, split: str, batch_size: int, shuffle_seed=None):
    """Shuffled partition of a split into batches; the last one may be short."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    idx = dataset.split(split)
    if idx.size == 0:
        raise ShapeError(f"split {split!r} is empty")
    if shuffle_seed is not None:
        idx = idx[np.random.default_rng(shuffle_seed).permutation(idx.size)]
    out = []
    for start in range(0, idx.size, batch_size):
        rows = idx[start:start + batch_size]
        xs, y = dataset.take(rows)
        out.append((xs, y if dataset.spec.task == "regression" else y.astype(np.int64)))
    return out


def save(dataset: Dataset, path):
    """Binary layout: magic, u16 version, spec record, per-modality matrices,
    targets, then train and test row indices."""
    w = Writer()
    w.raw(DATASET_MAGIC)
    w.u16(DATASET_VERSION)
    w.record(dataclasses.asdict(dataset.spec))
    w.u32(len(dataset.features))
    for f in dataset.features:
        w.f64_array(f, ndim=2)
    w.f64_array(dataset.targets, ndim=1)
    w.u32_array(dataset.train_idx)
    w.u32_array(dataset.test_idx)
    Path(path).write_bytes(w.getvalue())


def load(path) -> Dataset:
    r = Reader(Path(path).read_bytes())
    r.magic(DATASET_MAGIC)
    r.version(DATASET_VERSION)
    at = r.pos
    try:
        spec = SyntheticSpec(**r.record("spec record"))
    except (TypeError, ConfigError) as exc:
        raise FormatError(f"invalid spec record: {exc}", at) from None
    at = r.pos
    m = r.u32("modality count")
    if m != spec.modalities:
        raise FormatError(f"file holds {m} modalities, spec says {spec.modalities}", at)
    features = [r.f64_array(2, f"modality {i + 1}") for i in range(m)]
    at = r.pos
    targets = r.f64_array(1, "targets")
    if any(f.shape[0] != targets.shape[0] for f in features):
        raise FormatError("modalities are not row-aligned with targets", at)
    train = r.u32_array("train indices")
    test = r.u32_array("test indices")
    r.expect_end()
    rows = np.concatenate([train, test])
    if rows.size != targets.shape[0] or np.unique(rows).size != rows.size or (rows.size and rows.max() >= rows.size):
        raise FormatError("split indices are not a partition of the rows", r.pos)
    return Dataset(features, targets, train, test, spec)

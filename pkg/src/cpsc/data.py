"""Synthetic multimodal classification data with controllable imbalance and corruption.

Sample ``i`` for modality ``m`` is ``strength_m * mu[y, m] + N(0, sigma_m^2)`` with
unit-norm class prototypes ``mu`` fixed by the seed. Each sample draws from its
own counter-keyed generator, so any index range can be produced independently.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError

CORRUPTION_KINDS = ("none", "gaussian", "salt_pepper")


@dataclass
class ModalitySpec:
    input_dim: int = 16
    strength: float = 1.0
    sigma: float = 0.5

    def __post_init__(self):
        if self.strength < 0 or self.sigma < 0 or self.input_dim < 1:
            raise ConfigError("modality strength and sigma must be >= 0, input_dim >= 1")


@dataclass
class CorruptionSpec:
    kind: str = "none"
    strength: float = 0.0
    modalities: tuple[int, ...] = (0,)
    applied_at: str = "test"

    def __post_init__(self):
        self.modalities = tuple(int(m) for m in self.modalities)
        if self.kind not in CORRUPTION_KINDS:
            raise ConfigError(f"unknown corruption kind {self.kind!r}")
        if self.applied_at not in ("train", "test"):
            raise ConfigError("applied_at must be 'train' or 'test'")
        if self.strength < 0:
            raise ConfigError("corruption strength must be >= 0")


@dataclass
class GenSpec:
    class_count: int = 4
    samples: int = 2500
    test_samples: int = 1000
    modalities: list[ModalitySpec] = field(default_factory=lambda: [ModalitySpec(), ModalitySpec()])
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    seed: int = 0

    def __post_init__(self):
        self.modalities = [m if isinstance(m, ModalitySpec) else ModalitySpec(**m) for m in self.modalities]
        if isinstance(self.corruption, dict):
            self.corruption = CorruptionSpec(**self.corruption)
        if self.class_count < 2:
            raise ConfigError("class_count must be >= 2")

    @property
    def input_dims(self) -> tuple[int, ...]:
        return tuple(m.input_dim for m in self.modalities)


@dataclass
class Dataset:
    features: list[np.ndarray]
    labels: np.ndarray
    clean: list[np.ndarray]
    prototypes: list[np.ndarray]
    spec: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def modality_count(self) -> int:
        return len(self.features)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            [f[idx] for f in self.features],
            self.labels[idx],
            [c[idx] for c in self.clean],
            self.prototypes,
            self.spec,
        )

    def with_features(self, features) -> "Dataset":
        return Dataset(list(features), self.labels, self.clean, self.prototypes, self.spec)


def prototypes(spec: GenSpec) -> list[np.ndarray]:
    rng = np.random.default_rng([spec.seed, 1])
    out = []
    for mod in spec.modalities:
        mu = rng.normal(size=(spec.class_count, mod.input_dim))
        out.append(mu / np.linalg.norm(mu, axis=1, keepdims=True))
    return out


def generate(spec: GenSpec, offset: int = 0, count: int | None = None) -> Dataset:
    """Samples ``offset .. offset+count-1`` of the stream defined by ``spec``."""
    count = spec.samples if count is None else count
    protos = prototypes(spec)
    labels = np.empty(count, dtype=np.int64)
    feats = [np.empty((count, m.input_dim)) for m in spec.modalities]
    for i in range(count):
        rng = np.random.default_rng([spec.seed, 2, offset + i])
        y = int(rng.integers(spec.class_count))
        labels[i] = y
        for m, mod in enumerate(spec.modalities):
            feats[m][i] = mod.strength * protos[m][y] + mod.sigma * rng.normal(size=mod.input_dim)
    ds = Dataset(feats, labels, [f.copy() for f in feats], protos, _spec_echo(spec))
    if spec.corruption.applied_at == "train":
        ds = apply_corruption(ds, spec.corruption, seed=spec.seed)
    return ds


def generate_test(spec: GenSpec) -> Dataset:
    """Held-out draws from the same law, disjoint from the training stream."""
    ds = generate(_with_train_clean(spec), offset=spec.samples, count=spec.test_samples)
    return ds


def _with_train_clean(spec: GenSpec) -> GenSpec:
    if spec.corruption.applied_at != "train":
        return spec
    return GenSpec(spec.class_count, spec.samples, spec.test_samples, spec.modalities, CorruptionSpec(), spec.seed)


def corrupt(features: np.ndarray, kind: str, eps: float, rng: np.random.Generator, lo=None, hi=None) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if kind not in CORRUPTION_KINDS:
        raise ConfigError(f"unknown corruption kind {kind!r}")
    if kind == "none" or eps == 0:
        return features.copy()
    if kind == "gaussian":
        return features + eps * rng.normal(size=features.shape)
    p = min(eps / 20.0, 1.0)
    lo = features.min() if lo is None else lo
    hi = features.max() if hi is None else hi
    hit = rng.random(features.shape) < p
    high = rng.random(features.shape) < 0.5
    out = features.copy()
    out[hit] = np.where(high[hit], hi, lo)
    return out


def apply_corruption(ds: Dataset, corruption: CorruptionSpec, seed: int = 0) -> Dataset:
    feats = list(ds.features)
    for m in corruption.modalities:
        if not 0 <= m < len(feats):
            raise DimensionError(f"no modality {m} to corrupt")
        rng = np.random.default_rng([seed, 3, m])
        feats[m] = corrupt(feats[m], corruption.kind, corruption.strength, rng)
    return ds.with_features(feats)


def linear_probe_accuracy(x_train, y_train, x_test, y_test, class_count: int, ridge: float = 1e-3) -> float:
    """Accuracy of a ridge least-squares one-vs-all probe (with bias)."""
    xa = np.hstack([x_train, np.ones((x_train.shape[0], 1))])
    targets = np.eye(class_count)[y_train]
    w = np.linalg.solve(xa.T @ xa + ridge * np.eye(xa.shape[1]), xa.T @ targets)
    pred = np.argmax(np.hstack([x_test, np.ones((x_test.shape[0], 1))]) @ w, axis=1)
    return float(np.mean(pred == y_test))


def _spec_echo(spec: GenSpec) -> dict:
    return asdict(spec)


def save_dataset(ds: Dataset, path) -> None:
    header = {
        "spec": ds.spec,
        "count": len(ds),
        "input_dims": [f.shape[1] for f in ds.features],
    }
    arrays = {"labels": ds.labels}
    for m in range(ds.modality_count):
        arrays[f"features{m}"] = ds.features[m]
        arrays[f"clean{m}"] = ds.clean[m]
        arrays[f"prototypes{m}"] = ds.prototypes[m]
    with open(Path(path), "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_dataset(path) -> Dataset:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        M = len(header["input_dims"])
        return Dataset(
            [data[f"features{m}"].copy() for m in range(M)],
            data["labels"].copy(),
            [data[f"clean{m}"].copy() for m in range(M)],
            [data[f"prototypes{m}"].copy() for m in range(M)],
            header["spec"],
        )

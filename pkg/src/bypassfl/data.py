"""Seeded synthetic classification data and non-IID client partitions."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError

RESOLUTION_FACTORS = (1, 2, 4, 8)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ConfigError("feature rows and label count differ")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], dict(self.metadata))


def simplex_means(d: int, n_classes: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    """Vertices of a regular simplex with edge length ``separation``, randomly rotated into R^d."""
    if n_classes == 1:
        return np.zeros((1, d))
    centered = np.eye(n_classes) - 1.0 / n_classes
    u, s, _ = np.linalg.svd(centered)
    coords = u[:, : n_classes - 1] * s[: n_classes - 1]  # edge length sqrt(2)
    basis, _ = np.linalg.qr(rng.standard_normal((d, n_classes - 1)))
    return (coords @ basis.T) * (separation / np.sqrt(2.0))


def gen_blobs(n: int, d: int, n_classes: int, separation: float, seed: int) -> Dataset:
    """Balanced unit-covariance Gaussian clusters centred on a seeded simplex."""
    if n_classes < 1 or d < 1:
        raise ConfigError("need at least one class and one feature")
    if n < n_classes:
        raise ConfigError(f"n={n} is smaller than the number of classes {n_classes}")
    if not separation > 0:
        raise ConfigError("separation must be positive")
    if d < n_classes - 1:
        raise ConfigError(f"d={d} cannot hold a {n_classes}-class simplex")
    rng = np.random.default_rng(seed)
    means = simplex_means(d, n_classes, separation, rng)
    labels = rng.permutation(np.arange(n) % n_classes)
    features = means[labels] + rng.standard_normal((n, d))
    meta = {"generator": "blobs", "seed": seed,
            "params": {"n": n, "d": d, "n_classes": n_classes, "separation": separation}}
    return Dataset(features, labels.astype(np.int64), meta)


def regenerate(metadata: dict[str, Any]) -> Dataset:
    if metadata.get("generator") != "blobs":
        raise ConfigError(f"unknown generator {metadata.get('generator')!r}")
    ds = gen_blobs(seed=metadata["seed"], **metadata["params"])
    for factor in metadata.get("resolution_factors", []):
        ds = resolution_shift(ds, factor)
    return ds


def partition_dirichlet(ds: Dataset, n_clients: int, alpha: float, seed: int) -> dict[int, list[int]]:
    """Label-skewed split: each class is divided among clients by Dirichlet(alpha) proportions."""
    if n_clients < 1:
        raise ConfigError("need at least one client")
    if not alpha > 0:
        raise ConfigError("alpha must be positive")
    if len(ds) < n_clients:
        raise ConfigError(f"{len(ds)} samples cannot cover {n_clients} clients")
    rng = np.random.default_rng(seed)
    shards: list[list[int]] = [[] for _ in range(n_clients)]
    for c in np.unique(ds.labels):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        props = rng.dirichlet(np.full(n_clients, alpha))
        cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
        for k, part in enumerate(np.split(idx, cuts)):
            shards[k].extend(part.tolist())
    # guarantee non-empty shards by moving single samples off the largest one
    for k in range(n_clients):
        if not shards[k]:
            donor = max(range(n_clients), key=lambda j: (len(shards[j]), -j))
            shards[k].append(shards[donor].pop())
    return {k: sorted(s) for k, s in enumerate(shards)}


def partition_iid(ds: Dataset, n_clients: int, seed: int) -> dict[int, list[int]]:
    if n_clients < 1 or len(ds) < n_clients:
        raise ConfigError(f"{len(ds)} samples cannot cover {n_clients} clients")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return {k: sorted(part.tolist()) for k, part in enumerate(np.array_split(perm, n_clients))}


def resolution_shift(ds: Dataset, factor: int) -> Dataset:
    """Average consecutive groups of ``factor`` coordinates and repeat them back to width d."""
    if factor not in RESOLUTION_FACTORS:
        raise ConfigError(f"factor must be one of {RESOLUTION_FACTORS}, got {factor}")
    n, d = ds.features.shape
    if d % factor:
        raise ConfigError(f"d={d} is not divisible by factor {factor}")
    meta = dict(ds.metadata)
    meta["resolution_factors"] = list(meta.get("resolution_factors", [])) + [factor]
    if factor == 1:
        return Dataset(ds.features.copy(), ds.labels.copy(), meta)
    coarse = ds.features.reshape(n, d // factor, factor).mean(axis=2)
    return Dataset(np.repeat(coarse, factor, axis=1), ds.labels.copy(), meta)


def train_test_split(n: int, test_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random index split; keeps at least one training sample."""
    perm = rng.permutation(n)
    n_test = min(int(round(n * test_fraction)), n - 1)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def save_dataset_csv(ds: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"x{j}" for j in range(ds.n_features)])
        for y, row in zip(ds.labels, ds.features):
            writer.writerow([int(y)] + [repr(float(v)) for v in row])


def load_dataset_csv(path: str | Path) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    labels = np.array([int(r[0]) for r in body], dtype=np.int64)
    features = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64)
    return Dataset(features.reshape(len(body), len(rows[0]) - 1), labels, {"generator": "csv", "path": str(path)})

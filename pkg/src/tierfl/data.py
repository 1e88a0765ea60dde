"""Federated datasets: synthetic generation, CSV partitioning, minibatches.

Datasets are immutable after creation; minibatch sampling is Poisson
(independent per-point inclusion with probability q), which is the premise
of the subsampled-Gaussian accountant used by the privacy module.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import InvalidHeterogeneity, InvalidQ, MalformedRow, TooFewRows, ZeroSamples


@dataclass(frozen=True)
class FederatedDataset:
    """Per-device feature matrices and integer labels."""

    features: tuple        # device -> ndarray (D_j, d)
    labels: tuple          # device -> ndarray (D_j,)
    feature_dim: int
    num_classes: int

    @property
    def num_devices(self) -> int:
        return len(self.features)

    def device_size(self, device: int) -> int:
        return self.features[device].shape[0]

    def replace_point(self, device: int, index: int, x, y) -> "FederatedDataset":
        """Copy with one point of one device swapped (adjacent dataset)."""
        feats = list(self.features)
        labs = list(self.labels)
        f = feats[device].copy()
        l = labs[device].copy()
        f[index] = x
        l[index] = y
        feats[device], labs[device] = f, l
        return FederatedDataset(tuple(feats), tuple(labs), self.feature_dim,
                                self.num_classes)


@dataclass(frozen=True)
class Minibatch:
    """Sampled point indices for one device at one iteration."""

    device: int
    indices: np.ndarray
    sample_rate: float

    def __len__(self) -> int:
        return len(self.indices)


def generate_synthetic(num_devices: int, samples_per_device: int, feature_dim: int,
                       num_classes: int, heterogeneity: float, seed: int) -> FederatedDataset:
    """Gaussian-blob classification data split non-i.i.d. across devices.

    heterogeneity 0 gives i.i.d. class mixtures on every device; 1 gives each
    device a single-class shard (device j holds class j*C//J).  Intermediate
    values mix the uniform and one-hot class distributions linearly.
    """
    if num_devices <= 0 or samples_per_device <= 0 or feature_dim <= 0 or num_classes <= 0:
        raise ZeroSamples("device count, samples, dimensions and classes must be positive")
    if not 0.0 <= heterogeneity <= 1.0:
        raise InvalidHeterogeneity(f"heterogeneity {heterogeneity} outside [0, 1]")

    g_means = rng.stream(seed, rng.DATA, 0)
    means = g_means.normal(0.0, 3.0, size=(num_classes, feature_dim))

    uniform = np.full(num_classes, 1.0 / num_classes)
    features, labels = [], []
    for j in range(num_devices):
        g = rng.stream(seed, rng.DATA, 1, j)
        shard_class = j * num_classes // num_devices
        onehot = np.zeros(num_classes)
        onehot[shard_class] = 1.0
        mix = (1.0 - heterogeneity) * uniform + heterogeneity * onehot
        y = g.choice(num_classes, size=samples_per_device, p=mix)
        x = means[y] + g.normal(0.0, 1.0, size=(samples_per_device, feature_dim))
        features.append(x)
        labels.append(y.astype(np.int64))
    return FederatedDataset(tuple(features), tuple(labels), feature_dim, num_classes)


def partition_csv(path, num_devices: int, strategy: str = "iid") -> FederatedDataset:
    """Load rows `label, f_1, ..., f_d` and deal them across devices.

    iid deals rows round-robin in file order; by_label sorts by label and
    hands out contiguous shards, the standard non-i.i.d. protocol.
    """
    rows = []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise MalformedRow(f"line {lineno}: need a label and at least one feature")
            if len(row) != width:
                raise MalformedRow(f"line {lineno}: expected {width} columns, got {len(row)}")
            try:
                label = int(float(row[0]))
                feats = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise MalformedRow(f"line {lineno}: {exc}") from None
            rows.append((label, feats))
    if len(rows) < num_devices:
        raise TooFewRows(f"{len(rows)} rows cannot cover {num_devices} devices")

    if strategy == "by_label":
        order = sorted(range(len(rows)), key=lambda i: (rows[i][0], i))
        shards = np.array_split(np.array(order), num_devices)
        assignment = [list(s) for s in shards]
    elif strategy == "iid":
        assignment = [list(range(j, len(rows), num_devices)) for j in range(num_devices)]
    else:
        raise MalformedRow(f"unknown partition strategy {strategy!r}")

    features, labels = [], []
    for idx in assignment:
        features.append(np.array([rows[i][1] for i in idx], dtype=float))
        labels.append(np.array([rows[i][0] for i in idx], dtype=np.int64))
    num_classes = int(max(r[0] for r in rows)) + 1
    return FederatedDataset(tuple(features), tuple(labels), len(rows[0][1]), num_classes)


def sample_minibatch(dataset: FederatedDataset, device: int, q: float,
                     gen: np.random.Generator) -> Minibatch:
    """Poisson subsample of one device's points at inclusion probability q.

    An empty draw is resampled once; if still empty, a single uniformly
    chosen point keeps the gradient defined.
    """
    if not 0.0 < q <= 1.0:
        raise InvalidQ(f"sampling ratio {q} outside (0, 1]")
    size = dataset.device_size(device)
    mask = gen.random(size) < q
    if not mask.any():
        mask = gen.random(size) < q
    if mask.any():
        indices = np.flatnonzero(mask)
    else:
        indices = np.array([gen.integers(size)])
    return Minibatch(device=device, indices=indices, sample_rate=q)

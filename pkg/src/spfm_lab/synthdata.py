"""Synthetic labeled datasets, controlled label-noise injection with a
ground-truth corruption mask, and the 1:1 two-subset batch mixer.

Datasets are immutable after creation in the sense that no function here
mutates samples in place; noise injection returns a new dataset.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .numcore import RngStream


@dataclass
class Sample:
    id: int
    x1: np.ndarray
    label: int
    true_label: int
    is_corrupted: bool
    subset: str  # "A" or "B"


@dataclass
class Dataset:
    samples: list
    K: int
    data_dim: int
    generator_spec: dict

    def __len__(self):
        return len(self.samples)

    def features(self) -> np.ndarray:
        return np.stack([s.x1 for s in self.samples])

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def corruption_mask(self) -> np.ndarray:
        return np.array([s.is_corrupted for s in self.samples], dtype=bool)


@dataclass
class NoiseSpec:
    rho: float
    seed: int
    scheme: str = "symmetric-flip"


def mixture_means(K: int, radius: float) -> np.ndarray:
    """Class means on a circle, class k at angle 2 pi k / K."""
    angles = 2.0 * math.pi * np.arange(K) / K
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def gen_mixture(K: int, n_per_class: int, radius: float, sigma: float,
                dim: int, rng: RngStream, subset: str = "A",
                feature_noise: float = 0.0) -> Dataset:
    """Gaussian ring mixture: class k centered on the circle at angle 2 pi k/K.

    Only dim=2 is supported. ``feature_noise`` adds extra isotropic noise on
    top of the class spread (the "hard subset" knob).
    """
    if K < 2:
        raise ValueError(f"need K >= 2 classes, got {K}")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if dim != 2:
        raise ValueError(f"only dim=2 is supported, got {dim}")
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")

    means = mixture_means(K, radius)
    n = K * n_per_class
    X = np.repeat(means, n_per_class, axis=0) + sigma * rng.normal(size=(n, 2))
    if feature_noise > 0:
        X = X + feature_noise * rng.normal(size=(n, 2))
    labels = np.repeat(np.arange(K), n_per_class)
    spec = {
        "name": "mixture", "K": K, "n_per_class": n_per_class,
        "radius": radius, "sigma": sigma, "dim": 2,
        "feature_noise": feature_noise, "seed": rng.seed, "subset": subset,
    }
    samples = [
        Sample(id=i, x1=X[i], label=int(labels[i]), true_label=int(labels[i]),
               is_corrupted=False, subset=subset)
        for i in range(n)
    ]
    return Dataset(samples=samples, K=K, data_dim=2, generator_spec=spec)


def gen_moons(n_per_class: int, noise_sigma: float, rng: RngStream,
              subset: str = "A") -> Dataset:
    """Two interleaved half-circles; class 0 is the upper unit half-circle."""
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    theta0 = rng.uniform(0.0, math.pi, size=n_per_class)
    theta1 = rng.uniform(0.0, math.pi, size=n_per_class)
    upper = np.stack([np.cos(theta0), np.sin(theta0)], axis=1)
    lower = np.stack([1.0 - np.cos(theta1), 0.5 - np.sin(theta1)], axis=1)
    X = np.concatenate([upper, lower], axis=0)
    X = X + noise_sigma * rng.normal(size=X.shape)
    labels = np.repeat(np.arange(2), n_per_class)
    spec = {
        "name": "moons", "n_per_class": n_per_class,
        "noise_sigma": noise_sigma, "seed": rng.seed, "subset": subset,
    }
    samples = [
        Sample(id=i, x1=X[i], label=int(labels[i]), true_label=int(labels[i]),
               is_corrupted=False, subset=subset)
        for i in range(2 * n_per_class)
    ]
    return Dataset(samples=samples, K=2, data_dim=2, generator_spec=spec)


def inject_label_noise(ds: Dataset, spec: NoiseSpec) -> Dataset:
    """Flip exactly round(rho * n) labels, chosen without replacement.

    A flipped label is resampled uniformly from the K-1 other classes, so the
    corruption mask is exact by construction on clean input.
    """
    if not 0.0 <= spec.rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {spec.rho}")
    if ds.K < 2:
        raise ValueError(f"need K >= 2 to flip labels, got K={ds.K}")
    if spec.scheme != "symmetric-flip":
        raise ValueError(f"unknown noise scheme {spec.scheme!r}")

    n = len(ds.samples)
    n_corrupt = int(math.floor(spec.rho * n + 0.5))
    rng = RngStream(spec.seed, "noise")
    new_samples = [replace(s, x1=s.x1.copy()) for s in ds.samples]
    if n_corrupt > 0:
        picked = rng.choice_without_replacement(n, n_corrupt)
        offsets = rng.integers(1, ds.K, size=n_corrupt)
        for idx, off in zip(picked, offsets):
            s = new_samples[idx]
            s.label = int((s.label + off) % ds.K)
            s.is_corrupted = s.label != s.true_label
    gen_spec = dict(ds.generator_spec)
    gen_spec["noise"] = {"rho": spec.rho, "scheme": spec.scheme, "seed": spec.seed}
    return Dataset(samples=new_samples, K=ds.K, data_dim=ds.data_dim,
                   generator_spec=gen_spec)


class BatchMixer:
    """Draws batch_size/2 samples from each of two datasets per batch.

    Each subset is reshuffled when its permutation is exhausted, so the
    shorter subset recycles while the 1:1 ratio stays exact. State (current
    permutations and cursors) is serializable for checkpoint resume; the
    caller owns the rng stream's own state.
    """

    def __init__(self, A: Dataset, B: Dataset, batch_size: int, rng: RngStream):
        if batch_size % 2 != 0:
            raise ValueError(f"batch_size must be even, got {batch_size}")
        if batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {batch_size}")
        if len(A.samples) == 0 or len(B.samples) == 0:
            raise ValueError("both datasets must be non-empty")
        self.A = A
        self.B = B
        self.half = batch_size // 2
        self.rng = rng
        self._perm_a = rng.permutation(len(A.samples))
        self._perm_b = rng.permutation(len(B.samples))
        self._pos_a = 0
        self._pos_b = 0

    def _take(self, ds, perm_attr, pos_attr, k):
        out = []
        perm = getattr(self, perm_attr)
        pos = getattr(self, pos_attr)
        while k > 0:
            if pos == len(perm):
                perm = self.rng.permutation(len(ds.samples))
                pos = 0
            grab = min(k, len(perm) - pos)
            out.extend(ds.samples[i] for i in perm[pos:pos + grab])
            pos += grab
            k -= grab
        setattr(self, perm_attr, perm)
        setattr(self, pos_attr, pos)
        return out

    def next_batch(self) -> list:
        batch = self._take(self.A, "_perm_a", "_pos_a", self.half)
        batch += self._take(self.B, "_perm_b", "_pos_b", self.half)
        return batch

    def state_dict(self) -> dict:
        return {
            "perm_a": self._perm_a.tolist(), "pos_a": self._pos_a,
            "perm_b": self._perm_b.tolist(), "pos_b": self._pos_b,
            "rng": self.rng.state_dict(),
        }

    def load_state_dict(self, state: dict):
        self._perm_a = np.array(state["perm_a"], dtype=np.int64)
        self._perm_b = np.array(state["perm_b"], dtype=np.int64)
        self._pos_a = int(state["pos_a"])
        self._pos_b = int(state["pos_b"])
        self.rng = RngStream.from_state_dict(state["rng"])


def mixed_batches(A: Dataset, B: Dataset, batch_size: int, rng: RngStream):
    """Endless stream of 1:1 mixed batches (generator over BatchMixer)."""
    mixer = BatchMixer(A, B, batch_size, rng)
    while True:
        yield mixer.next_batch()


def save_dataset(ds: Dataset, path) -> None:
    """Write the dataset file: one metadata line (n, dim, K, generator spec as
    JSON), then one line per sample. UTF-8, '.' decimal, LF newlines."""
    spec_json = json.dumps(ds.generator_spec, sort_keys=True, separators=(",", ":"))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([len(ds.samples), ds.data_dim, ds.K, spec_json])
        for s in ds.samples:
            row = [s.id]
            row.extend(repr(float(v)) for v in s.x1)
            row.extend([s.label, s.true_label, int(s.is_corrupted), s.subset])
            writer.writerow(row)


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"empty dataset file: {path}")
        if len(header) != 4:
            raise ValueError(f"malformed dataset header in {path}: {header}")
        n, dim, K = int(header[0]), int(header[1]), int(header[2])
        spec = json.loads(header[3])
        samples = []
        for row in reader:
            if len(row) != dim + 5:
                raise ValueError(f"malformed sample row in {path}: {row}")
            samples.append(Sample(
                id=int(row[0]),
                x1=np.array([float(v) for v in row[1:1 + dim]]),
                label=int(row[1 + dim]),
                true_label=int(row[2 + dim]),
                is_corrupted=bool(int(row[3 + dim])),
                subset=row[4 + dim],
            ))
    if len(samples) != n:
        raise ValueError(f"dataset file {path} declares {n} samples, found {len(samples)}")
    return Dataset(samples=samples, K=K, data_dim=dim, generator_spec=spec)

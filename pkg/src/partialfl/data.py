"""Synthetic two-modality data, client partitioning and modality masking.

Both modalities are noisy nonlinear views of one class-conditional latent
vector, so aligning them across modalities is learnable. Global sample ids
are fixed at generation time and survive every later split.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

MAX_PARTITION_RETRIES = 100


class PartitionError(ValueError):
    """No valid partition exists or none was found within the retry budget."""


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 4
    num_samples: int = 4000
    latent_dim: int = 8
    audio_dim: int = 32
    text_dim: int = 32
    audio_noise: float = 0.5
    text_noise: float = 0.5
    separation: float = 3.0
    test_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_samples < self.num_classes:
            raise ValueError("num_samples must be >= num_classes")
        if min(self.latent_dim, self.audio_dim, self.text_dim) < 1:
            raise ValueError("dimensions must be positive")
        if self.audio_noise < 0 or self.text_noise < 0:
            raise ValueError("noise scales must be non-negative")
        if self.separation < 0:
            raise ValueError("separation must be non-negative")
        if not 0 <= self.test_fraction < 1:
            raise ValueError("test_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "dirichlet"
    alpha: float = 1.0
    num_clients: int = 20
    q: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in ("dirichlet", "speaker_equal"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if not 0 <= self.q <= 1:
            raise ValueError("q must lie in [0, 1]")


@dataclass
class Dataset:
    """Raw per-modality features for every sample plus the held-out mask."""

    ids: np.ndarray
    labels: np.ndarray
    audio: np.ndarray
    text: np.ndarray
    is_test: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return self.ids.size

    def subset(self, mask: np.ndarray) -> "Dataset":
        return Dataset(
            self.ids[mask], self.labels[mask], self.audio[mask], self.text[mask], self.is_test[mask], self.num_classes
        )

    def train(self) -> "Dataset":
        return self.subset(~self.is_test)

    def test(self) -> "Dataset":
        return self.subset(self.is_test)


@dataclass
class ClientShard:
    client_id: int
    ids: np.ndarray
    labels: np.ndarray
    audio: np.ndarray
    text: np.ndarray | None
    has_shareable: bool = True

    @property
    def size(self) -> int:
        return self.ids.size


class SyntheticGenerator:
    """Holds the seeded class centres and modality mixing matrices."""

    def __init__(self, spec: SyntheticSpec, rng: np.random.Generator):
        self.spec = spec
        directions = rng.normal(size=(spec.num_classes, spec.latent_dim))
        if spec.num_classes <= spec.latent_dim:
            # orthonormal centres keep pairwise distances equal across seeds
            q, _ = np.linalg.qr(directions.T)
            directions = q.T
        else:
            directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        self.centers = spec.separation * directions
        scale = 1.0 / np.sqrt(spec.latent_dim)
        self.audio_mix = rng.normal(0.0, scale, size=(spec.latent_dim, spec.audio_dim))
        self.text_mix = rng.normal(0.0, scale, size=(spec.latent_dim, spec.text_dim))

    def render(self, latent: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Map latents to (audio, text) views with additive Gaussian noise."""
        s = self.spec
        audio = np.tanh(latent @ self.audio_mix) + s.audio_noise * rng.normal(size=(latent.shape[0], s.audio_dim))
        text = np.tanh(latent @ self.text_mix) + s.text_noise * rng.normal(size=(latent.shape[0], s.text_dim))
        return audio, text

    def sample(self, rng: np.random.Generator) -> Dataset:
        s = self.spec
        labels = np.arange(s.num_samples) % s.num_classes
        rng.shuffle(labels)
        latent = self.centers[labels] + rng.normal(size=(s.num_samples, s.latent_dim))
        audio, text = self.render(latent, rng)
        is_test = np.zeros(s.num_samples, dtype=bool)
        for c in range(s.num_classes):
            members = np.flatnonzero(labels == c)
            n_test = int(np.floor(s.test_fraction * members.size + 0.5))
            is_test[rng.permutation(members)[:n_test]] = True
        return Dataset(np.arange(s.num_samples), labels, audio, text, is_test, s.num_classes)


def generate_synthetic(spec: SyntheticSpec, rng: np.random.Generator) -> Dataset:
    return SyntheticGenerator(spec, rng).sample(rng)


def dirichlet_partition(
    labels: np.ndarray, num_clients: int, alpha: float, rng: np.random.Generator
) -> list[np.ndarray]:
    """Per-class Dirichlet(alpha) allocation; returns sorted position arrays per client.

    Draws that leave a client empty are discarded and redrawn.
    """
    labels = np.asarray(labels)
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if num_clients > labels.size:
        raise PartitionError(f"cannot give {num_clients} clients at least one of {labels.size} samples")
    classes = np.unique(labels)
    for _ in range(MAX_PARTITION_RETRIES):
        groups: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for c in classes:
            members = rng.permutation(np.flatnonzero(labels == c))
            props = rng.dirichlet(np.full(num_clients, alpha))
            cuts = (np.cumsum(props) * members.size).astype(int)[:-1]
            for k, chunk in enumerate(np.split(members, cuts)):
                groups[k].append(chunk)
        parts = [np.sort(np.concatenate(g)) for g in groups]
        if all(p.size > 0 for p in parts):
            return parts
    raise PartitionError(f"no partition without empty clients after {MAX_PARTITION_RETRIES} draws")


def speaker_equal_partition(num_samples: int, num_clients: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Random split into equal-size (+-1) groups, one per simulated speaker."""
    if num_clients > num_samples:
        raise PartitionError(f"cannot give {num_clients} clients at least one of {num_samples} samples")
    return [np.sort(g) for g in np.array_split(rng.permutation(num_samples), num_clients)]


def build_shards(data: Dataset, groups: Sequence[np.ndarray]) -> list[ClientShard]:
    return [
        ClientShard(k, data.ids[g], data.labels[g], data.audio[g], data.text[g], True)
        for k, g in enumerate(groups)
    ]


def apply_missing_modality(shards: Sequence[ClientShard], q: float, rng: np.random.Generator) -> list[ClientShard]:
    """Keep the shareable modality on exactly round(q*K) clients; strip it elsewhere."""
    if not 0 <= q <= 1:
        raise ValueError("q must lie in [0, 1]")
    k = len(shards)
    keep = int(np.floor(q * k + 0.5))
    chosen = set(rng.choice(k, size=keep, replace=False).tolist())
    return [
        replace(s, has_shareable=True) if i in chosen else replace(s, text=None, has_shareable=False)
        for i, s in enumerate(shards)
    ]


def partition(data: Dataset, spec: PartitionSpec, rng: np.random.Generator) -> list[ClientShard]:
    """Split the training portion of ``data`` into client shards, then mask modalities.

    The split is drawn before the mask, so changing ``q`` never changes which
    samples a client holds.
    """
    train = data.train()
    if spec.mode == "dirichlet":
        groups = dirichlet_partition(train.labels, spec.num_clients, spec.alpha, rng)
    else:
        groups = speaker_equal_partition(len(train), spec.num_clients, rng)
    shards = apply_missing_modality(build_shards(train, groups), spec.q, rng)
    logger.debug("partitioned %d samples over %d clients", len(train), len(shards))
    return shards


def label_histogram(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(labels), minlength=num_classes)


def export_csv(data: Dataset, path: str | Path) -> None:
    """Flat columnar export: id, label, split, audio_*, text_*."""
    header = ["id", "label", "split"]
    header += [f"audio_{i}" for i in range(data.audio.shape[1])]
    header += [f"text_{i}" for i in range(data.text.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(data)):
            row = [int(data.ids[i]), int(data.labels[i]), "test" if data.is_test[i] else "train"]
            row += [repr(float(v)) for v in data.audio[i]]
            row += [repr(float(v)) for v in data.text[i]]
            w.writerow(row)


def import_csv(path: str | Path, num_classes: int | None = None) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    a_cols = [i for i, h in enumerate(header) if h.startswith("audio_")]
    t_cols = [i for i, h in enumerate(header) if h.startswith("text_")]
    ids = np.array([int(r[0]) for r in body])
    labels = np.array([int(r[1]) for r in body])
    is_test = np.array([r[2] == "test" for r in body])
    audio = np.array([[float(r[i]) for i in a_cols] for r in body]).reshape(len(body), len(a_cols))
    text = np.array([[float(r[i]) for i in t_cols] for r in body]).reshape(len(body), len(t_cols))
    c = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(ids, labels, audio, text, is_test, c)

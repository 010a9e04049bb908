"""Synthetic non-IID classification data for desk-scale experiments.

Classes are unit-covariance Gaussians whose means sit on a scaled simplex:
mean_k = margin * sqrt(2) * e_k, which places every pair of means
2 * margin apart, i.e. each mean is ``margin`` noise standard deviations
from the nearest decision boundary. Client shards are non-IID via a
per-client label distribution drawn from Dirichlet(alpha): small alpha
concentrates a client on few labels, large alpha approaches uniform.

The eval split is class-balanced and shared by every scheme in an
experiment; ``dataset_hash`` fingerprints all generated arrays so runs can
prove they trained on identical data.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

__all__ = ["DatasetSpec", "generate_dataset", "dataset_hash"]

Shard = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int
    input_dim: int
    samples_per_client: int
    eval_samples: int
    dirichlet_alpha: float
    class_margin: float

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.input_dim < self.num_classes:
            raise ValueError(
                f"input_dim {self.input_dim} must be >= num_classes "
                f"{self.num_classes} to place simplex means"
            )
        if self.samples_per_client < 1 or self.eval_samples < 1:
            raise ValueError("sample counts must be positive")
        if self.dirichlet_alpha <= 0:
            raise ValueError("dirichlet_alpha must be positive")
        if self.class_margin <= 0:
            raise ValueError("class_margin must be positive")


def class_means(spec: DatasetSpec) -> np.ndarray:
    means = np.zeros((spec.num_classes, spec.input_dim))
    scale = spec.class_margin * math.sqrt(2.0)
    for k in range(spec.num_classes):
        means[k, k] = scale
    return means


def generate_dataset(
    spec: DatasetSpec, num_clients: int, seed: int
) -> tuple[list[Shard], Shard]:
    """Per-client non-IID shards plus one balanced eval split.

    Bit-identical for identical (spec, num_clients, seed); every client and
    the eval split consume independent child streams of the seed, so adding
    a client does not shift anyone else's data.
    """
    if num_clients < 1:
        raise ValueError("need at least one client")
    means = class_means(spec)
    children = np.random.SeedSequence(seed).spawn(num_clients + 1)

    shards: list[Shard] = []
    for child in children[:num_clients]:
        rng = np.random.default_rng(child)
        probs = rng.dirichlet(np.full(spec.num_classes, spec.dirichlet_alpha))
        labels = rng.choice(spec.num_classes, size=spec.samples_per_client, p=probs)
        x = means[labels] + rng.normal(size=(spec.samples_per_client, spec.input_dim))
        shards.append((x, labels))

    eval_rng = np.random.default_rng(children[num_clients])
    eval_labels = np.arange(spec.eval_samples) % spec.num_classes
    eval_x = means[eval_labels] + eval_rng.normal(
        size=(spec.eval_samples, spec.input_dim)
    )
    return shards, (eval_x, eval_labels)


def dataset_hash(shards: list[Shard], eval_split: Shard) -> str:
    """SHA-256 over every array's bytes, in a fixed order."""
    h = hashlib.sha256()
    for x, y in [*shards, eval_split]:
        h.update(np.ascontiguousarray(x).tobytes())
        h.update(np.ascontiguousarray(y.astype(np.int64)).tobytes())
    return h.hexdigest()

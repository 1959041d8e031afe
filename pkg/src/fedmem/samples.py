"""Labeled sample containers."""

from __future__ import annotations

from typing import Iterable, NamedTuple, Sequence, Union

import numpy as np


class Samples(NamedTuple):
    """Feature matrix ``X`` of shape (n, d) and integer labels ``y`` of shape (n,)."""

    X: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:  # type: ignore[override]
        return int(self.y.shape[0])

    def take(self, idx) -> "Samples":
        idx = np.asarray(idx, dtype=np.int64)
        return Samples(self.X[idx], self.y[idx])

    @staticmethod
    def empty(dim: int) -> "Samples":
        return Samples(np.zeros((0, dim)), np.zeros(0, dtype=np.int64))

    @staticmethod
    def concat(parts: Sequence["Samples"]) -> "Samples":
        return Samples(
            np.concatenate([p.X for p in parts], axis=0),
            np.concatenate([p.y for p in parts], axis=0),
        )


SampleLike = Union[Samples, Iterable[tuple]]


def as_samples(batch: SampleLike) -> Samples:
    """Accept either a ``Samples`` or a list of ``(x, y)`` pairs."""
    if isinstance(batch, Samples):
        return batch
    pairs = list(batch)
    if not pairs:
        return Samples(np.zeros((0, 0)), np.zeros(0, dtype=np.int64))
    X = np.asarray([np.asarray(x, dtype=np.float64) for x, _ in pairs], dtype=np.float64)
    y = np.asarray([int(label) for _, label in pairs], dtype=np.int64)
    return Samples(X, y)

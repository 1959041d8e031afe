"""kNN-Per predictor: kernel label posterior from the local datastore mixed with the global model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .datastore import Datastore, Neighborhood, PrototypeStore, knn_query_batch
from .errors import ConfigurationError, EmptyNeighborhoodError, InputError
from .nn import Model, forward_batch, softmax
from .samples import SampleLike, as_samples

DEFAULT_GRID = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0)
SIMPLEX_TOL = 1e-6

Store = Union[Datastore, PrototypeStore, None]


@dataclass(frozen=True)
class KernelConfig:
    k: int = 10
    sigma: float = 1.0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError("k must be >= 1")
        if not self.sigma > 0:
            raise ConfigurationError("sigma must be positive")


@dataclass(frozen=True, eq=False)
class PersonalizedPredictor:
    model: Model
    store: Store
    kernel: KernelConfig = KernelConfig()
    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda must lie in [0, 1], got {self.lam}")
        dim = self.store.projection.shape[0] if isinstance(self.store, PrototypeStore) else (
            self.store.dim if self.store is not None else self.model.repr_dim
        )
        if dim != self.model.repr_dim:
            raise ConfigurationError(f"datastore dim {dim} does not match representation dim {self.model.repr_dim}")


def knn_posterior(neighborhood: Neighborhood, num_classes: int) -> np.ndarray:
    """Label distribution with weight exp(-d_i) per neighbor.

    Works on a single neighborhood or a batch (leading query axis). The
    smallest distance is subtracted before exponentiating; this cancels in
    the normalization and keeps far-away neighborhoods from underflowing.
    """
    d = np.asarray(neighborhood.distances, dtype=np.float64)
    labels = np.asarray(neighborhood.labels, dtype=np.int64)
    if d.shape[-1] == 0:
        raise EmptyNeighborhoodError("knn_posterior needs at least one neighbor")
    single = d.ndim == 1
    d2 = np.atleast_2d(d)
    lab = np.atleast_2d(labels)
    w = np.exp(-(d2 - d2.min(axis=1, keepdims=True)))
    post = np.zeros((d2.shape[0], num_classes))
    np.add.at(post, (np.arange(d2.shape[0])[:, None].repeat(d2.shape[1], 1), lab), w)
    post /= post.sum(axis=1, keepdims=True)
    return post[0] if single else post


def _check_simplex(p: np.ndarray, name: str) -> None:
    if np.any(p < -SIMPLEX_TOL) or np.any(np.abs(p.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise InputError(f"{name} is not a probability vector")


def interpolate(knn_post, global_post, lam: float) -> np.ndarray:
    """lam * knn + (1 - lam) * global."""
    knn_post = np.asarray(knn_post, dtype=np.float64)
    global_post = np.asarray(global_post, dtype=np.float64)
    if knn_post.shape != global_post.shape:
        raise InputError("posteriors must have the same shape")
    if not 0.0 <= lam <= 1.0:
        raise InputError(f"lambda must lie in [0, 1], got {lam}")
    _check_simplex(knn_post, "knn posterior")
    _check_simplex(global_post, "global posterior")
    return lam * knn_post + (1.0 - lam) * global_post


def component_posteriors(model: Model, store: Store, kernel: KernelConfig, X: np.ndarray):
    """Global probabilities and kNN posteriors for a batch (kNN part is None for an empty store)."""
    logits, reps = forward_batch(model, X)
    global_post = softmax(logits)
    if store is None or len(store) == 0:
        return global_post, None
    if isinstance(store, PrototypeStore):
        reps = store.project(reps)
        store = store.store
    nb = knn_query_batch(store, reps, kernel.k, kernel.sigma)
    return global_post, knn_posterior(nb, model.num_classes)


def predict_batch(pred: PersonalizedPredictor, X: np.ndarray) -> np.ndarray:
    global_post, knn_post = component_posteriors(pred.model, pred.store, pred.kernel, X)
    if knn_post is None:
        return global_post
    return interpolate(knn_post, global_post, pred.lam)


def predict(pred: PersonalizedPredictor, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputError("predict takes a single feature vector; use predict_batch for batches")
    return predict_batch(pred, x[None, :])[0]


def accuracy(probs: np.ndarray, y: np.ndarray) -> float:
    """Argmax accuracy; ties go to the lowest class id."""
    if len(y) == 0:
        raise InputError("accuracy over an empty set")
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(y)))


def evaluate(pred: PersonalizedPredictor, test: SampleLike) -> float:
    s = as_samples(test)
    if len(s) == 0:
        raise InputError("evaluate needs a non-empty test set")
    return accuracy(predict_batch(pred, s.X), s.y)


def lambda_curve(
    model: Model,
    store: Store,
    kernel: KernelConfig,
    samples: SampleLike,
    grid: Sequence[float] = DEFAULT_GRID,
) -> np.ndarray:
    """Accuracy at each grid value, reusing one embedding + kNN pass."""
    s = as_samples(samples)
    if len(s) == 0:
        raise InputError("lambda tuning needs a non-empty validation set")
    global_post, knn_post = component_posteriors(model, store, kernel, s.X)
    if knn_post is None:
        return np.full(len(grid), accuracy(global_post, s.y))
    return np.array([accuracy(interpolate(knn_post, global_post, lam), s.y) for lam in grid])


def tune_lambda(
    model: Model,
    store: Store,
    kernel: KernelConfig,
    val: SampleLike,
    grid: Sequence[float] = DEFAULT_GRID,
) -> tuple[float, float]:
    """Grid search for the mixing weight; ties go to the smaller lambda."""
    grid = [float(g) for g in grid]
    if not grid or any(not 0.0 <= g <= 1.0 for g in grid):
        raise ConfigurationError("lambda grid must be a non-empty subset of [0, 1]")
    if 0.0 not in grid or 1.0 not in grid:
        raise ConfigurationError("lambda grid must contain both 0 and 1")
    order = sorted(range(len(grid)), key=lambda i: grid[i])
    accs = lambda_curve(model, store, kernel, val, [grid[i] for i in order])
    best = int(np.argmax(accs))  # first max in ascending-lambda order
    return grid[order[best]], float(accs[best])


def tuned_predictor(
    model: Model,
    store: Store,
    kernel: KernelConfig,
    val: SampleLike,
    grid: Sequence[float] = DEFAULT_GRID,
) -> tuple[PersonalizedPredictor, float]:
    lam, val_acc = tune_lambda(model, store, kernel, val, grid)
    return PersonalizedPredictor(model, store, kernel, lam), val_acc

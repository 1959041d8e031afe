"""Simulated FedAvg plus the Local and FedAvg+ (fine-tuning) baselines."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import ClientDataset
from .errors import ConfigurationError, InputError
from .nn import LayerSpec, Model, init_model, loss_and_grad_arrays, mean_loss, sgd_step
from .samples import SampleLike, Samples, as_samples
from .seeding import derive_seed, rng_for


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 100
    participation: float = 1.0
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.1
    lr_schedule: tuple[tuple[int, float], ...] = ()
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigurationError("rounds must be >= 0")
        if not 0 < self.participation <= 1:
            raise ConfigurationError("participation must lie in (0, 1]")
        if self.local_epochs < 0:
            raise ConfigurationError("local_epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigurationError("lr must be non-negative")
        for _, factor in self.lr_schedule:
            if factor <= 0:
                raise ConfigurationError("lr schedule factors must be positive")

    def lr_at(self, round_idx: int) -> float:
        """Base lr times every factor whose drop round is <= ``round_idx``."""
        lr = self.lr
        for at, factor in sorted(self.lr_schedule):
            if round_idx >= at:
                lr *= factor
        return lr

    @property
    def final_lr(self) -> float:
        return self.lr_at(max(self.rounds - 1, 0))


@dataclass
class RoundLog:
    round: int
    participants: list[int]
    global_loss: float
    lr: float
    eval: dict[str, float] = field(default_factory=dict)


def num_participants(q: float, M: int) -> int:
    return max(1, math.ceil(q * M - 1e-9))


def local_update(
    model: Model,
    train: SampleLike,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
) -> Model:
    """``epochs`` passes of mini-batch SGD, reshuffled every epoch."""
    s = as_samples(train)
    n = len(s)
    if n == 0:
        raise InputError("local_update needs a non-empty training set")
    if epochs == 0 or lr == 0:
        return model
    params = model.params.copy()
    current = model
    for epoch in range(epochs):
        order = rng_for(seed, "epoch", epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, grad = loss_and_grad_arrays(current, s.X[idx], s.y[idx])
            params = params - lr * grad
            current = model.with_params(params)
    return current


def aggregate(
    global_model: Model,
    updates: Mapping[int, Model],
    weights: Mapping[int, float] | Sequence[float],
    participants: Sequence[int],
) -> Model:
    """Population-weighted aggregation with partial participation.

    Clients outside ``participants`` contribute the current global
    parameters with weight n_m/n; participants contribute their update.
    Written as ``w + sum_S (n_m/n)(w_m - w)`` so that an empty round or a
    round of unchanged updates returns the global model bit for bit. Under
    full participation the weighted mean ``sum (n_m/n) w_m`` is computed
    relative to the first update, which keeps the average of identical
    models exact.
    """
    if isinstance(weights, Mapping):
        n_of = {int(k): float(v) for k, v in weights.items()}
    else:
        n_of = {i: float(v) for i, v in enumerate(weights)}
    if any(v <= 0 for v in n_of.values()):
        raise ConfigurationError("aggregation weights must be positive")
    participants = sorted(set(int(m) for m in participants))
    for m in participants:
        if m not in n_of:
            raise ConfigurationError(f"participant {m} has no weight")
        if m not in updates:
            raise ConfigurationError(f"participant {m} has no update")
        upd = updates[m]
        if upd.layers != global_model.layers or upd.params.shape != global_model.params.shape:
            raise ConfigurationError(f"update from client {m} has a different layout")
    if not participants:
        return global_model
    n_total = sum(n_of.values())
    # full participation: nobody contributes w, so anchor at a participant
    w = updates[participants[0]].params if len(participants) == len(n_of) else global_model.params
    acc = w.copy()
    for m in participants:
        acc += (n_of[m] / n_total) * (updates[m].params - w)
    return global_model.with_params(acc)


def weighted_train_loss(model: Model, clients: Sequence[ClientDataset]) -> float:
    total = sum(len(c.train) for c in clients)
    return float(sum(len(c.train) * mean_loss(model, c.train.X, c.train.y) for c in clients) / total)


def client_seed(seed: int, round_idx: int, client_id: int) -> int:
    return derive_seed(seed, "round", round_idx, "client", client_id)


def run_fedavg(
    clients: Sequence[ClientDataset],
    init: Model,
    cfg: FedConfig,
    log_loss: bool = True,
) -> tuple[Model, list[RoundLog]]:
    """FedAvg over ``clients`` starting from ``init``.

    Each round samples ``ceil(q*M)`` distinct clients uniformly without
    replacement, runs ``local_update`` on each from the current global
    model, and aggregates. Local randomness comes from a per-(round, client)
    derived seed, so ``cfg.workers > 1`` gives identical results.
    """
    if not clients:
        raise ConfigurationError("run_fedavg needs at least one client")
    M = len(clients)
    weights = {i: float(len(c.train)) for i, c in enumerate(clients)}
    k = num_participants(cfg.participation, M)
    model = init
    logs = []
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for t in range(cfg.rounds):
            lr = cfg.lr_at(t)
            if k == M:
                chosen = list(range(M))
            else:
                chosen = sorted(int(i) for i in rng_for(cfg.seed, "sample", t).choice(M, size=k, replace=False))

            def work(i, model=model, lr=lr, t=t):
                c = clients[i]
                return local_update(model, c.train, cfg.local_epochs, lr, cfg.batch_size, client_seed(cfg.seed, t, i))

            results = list(pool.map(work, chosen)) if pool else [work(i) for i in chosen]
            model = aggregate(model, dict(zip(chosen, results)), weights, chosen)
            loss = weighted_train_loss(model, clients) if log_loss else float("nan")
            logs.append(RoundLog(t, [clients[i].client_id for i in chosen], loss, lr))
    finally:
        if pool:
            pool.shutdown()
    return model, logs


def fine_tune(
    global_model: Model,
    client: ClientDataset,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
) -> Model:
    """FedAvg+ baseline: continue SGD on the client's train split."""
    return local_update(global_model, client.train, epochs, lr, batch_size, derive_seed(seed, "finetune", client.client_id))


def train_local(
    client: ClientDataset,
    spec: Sequence[LayerSpec],
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
    repr_index: int | None = None,
) -> Model:
    """Local baseline: a fresh model trained only on the client's own train split."""
    model = init_model(spec, repr_index, derive_seed(seed, "local-init", client.client_id))
    return local_update(model, client.train, epochs, lr, batch_size, derive_seed(seed, "local", client.client_id))


def train_central(
    data: Samples,
    init: Model,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
    checkpoints: Sequence[int] = (),
) -> tuple[Model, dict[int, Model]]:
    """Plain SGD on pooled data, snapshotting the model after selected epochs."""
    model = init
    snaps = {}
    if 0 in checkpoints:
        snaps[0] = init
    for epoch in range(1, epochs + 1):
        model = local_update(model, data, 1, lr, batch_size, derive_seed(seed, "central", epoch))
        if epoch in checkpoints:
            snaps[epoch] = model
    return model, snaps

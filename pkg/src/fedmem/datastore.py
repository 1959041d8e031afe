"""Client-side key/value memory of (representation, label) pairs.

Retrieval is an exact linear scan. Neighbors are ordered by unscaled
Euclidean distance with ties going to the lower insertion sequence number;
the scale ``sigma`` only divides the reported distances, so it can never
change which entries come back or their order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, EmptyStoreError, FormatError, InputError
from .nn import Model, embed
from .data import largest_remainder
from .samples import SampleLike, as_samples
from .seeding import derive_seed, rng_for

POLICIES = ("fixed", "fifo", "concatenate")
STORE_MAGIC = b"FMDS"
STORE_VERSION = 1
_POLICY_CODES = {name: i for i, name in enumerate(POLICIES)}


@dataclass(frozen=True, eq=False)
class Datastore:
    keys: np.ndarray  # (n, p)
    labels: np.ndarray  # (n,)
    seqs: np.ndarray  # (n,) insertion sequence numbers, strictly increasing
    dim: int
    capacity: int | None = None
    policy: str = "fixed"

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigurationError(f"unknown datastore policy {self.policy!r}")
        if self.capacity is not None and self.capacity < 1:
            raise ConfigurationError("capacity must be >= 1 when set")
        keys = np.asarray(self.keys, dtype=np.float64).reshape(-1, self.dim)
        labels = np.asarray(self.labels, dtype=np.int64)
        seqs = np.asarray(self.seqs, dtype=np.int64)
        if not keys.shape[0] == labels.shape[0] == seqs.shape[0]:
            raise ConfigurationError("keys, labels and seqs must have equal length")
        for arr in (keys, labels, seqs):
            arr.flags.writeable = False
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "seqs", seqs)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def next_seq(self) -> int:
        return int(self.seqs[-1]) + 1 if len(self) else 0

    @staticmethod
    def empty(dim: int, capacity: int | None = None, policy: str = "fixed") -> "Datastore":
        return Datastore(np.zeros((0, dim)), np.zeros(0, np.int64), np.zeros(0, np.int64), dim, capacity, policy)

    @staticmethod
    def from_arrays(keys, labels, capacity: int | None = None, policy: str = "fixed") -> "Datastore":
        keys = np.asarray(keys, dtype=np.float64)
        return Datastore(keys, labels, np.arange(keys.shape[0]), keys.shape[1], capacity, policy)

    def with_policy(self, policy: str, capacity: int | None = None) -> "Datastore":
        return Datastore(self.keys, self.labels, self.seqs, self.dim, capacity, policy)


class Neighborhood(NamedTuple):
    """Up to k nearest entries; rows of each array are ordered nearest first."""

    indices: np.ndarray  # positions in the store
    seqs: np.ndarray
    keys: np.ndarray
    labels: np.ndarray
    distances: np.ndarray  # ||q - key|| / sigma, non-decreasing

    def __len__(self) -> int:  # type: ignore[override]
        return int(self.labels.shape[-1])


def build_datastore(
    model: Model,
    samples: SampleLike,
    capacity_fraction: float = 1.0,
    seed: int = 0,
    policy: str = "fixed",
    capacity: int | None = None,
) -> Datastore:
    """One forward pass over ``samples``; keep a seeded uniform subset of ceil(fraction * n).

    The subset is a prefix of one seeded permutation, so for a fixed seed a
    smaller fraction always keeps a subset of what a larger one keeps.
    Retained entries keep their original sample order.
    """
    s = as_samples(samples)
    n = len(s)
    if n == 0:
        raise InputError("build_datastore needs at least one sample")
    if not 0 < capacity_fraction <= 1:
        raise ConfigurationError("capacity_fraction must lie in (0, 1]")
    keep = min(n, math.ceil(capacity_fraction * n - 1e-9))
    if keep < n:
        idx = np.sort(rng_for(seed, "capacity").permutation(n)[:keep])
        s = s.take(idx)
    keys = embed(model, s.X)
    if policy == "fifo" and capacity is None:
        capacity = len(s)
    return Datastore(keys, s.y, np.arange(len(s)), model.repr_dim, capacity, policy)


def _scan(store: Datastore, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Ordered neighbor positions ``(nq, k')`` and unscaled distances."""
    if len(store) == 0:
        raise EmptyStoreError("query against an empty datastore")
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    dist = np.empty((queries.shape[0], len(store)))
    step = max(1, 2_000_000 // max(1, len(store) * store.dim))
    for lo in range(0, queries.shape[0], step):
        diff = queries[lo : lo + step, None, :] - store.keys[None, :, :]
        dist[lo : lo + step] = np.sqrt((diff * diff).sum(axis=-1))
    kk = min(k, len(store))
    order = np.empty((queries.shape[0], kk), dtype=np.int64)
    for i in range(queries.shape[0]):
        order[i] = np.lexsort((store.seqs, dist[i]))[:kk]
    return order, np.take_along_axis(dist, order, axis=1)


def knn_query_batch(store: Datastore, queries: np.ndarray, k: int, sigma: float = 1.0) -> Neighborhood:
    """Nearest neighbors for every row of ``queries``; arrays gain a leading query axis."""
    if sigma <= 0:
        raise ConfigurationError("sigma must be positive")
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != store.dim:
        raise InputError(f"queries must have shape (n, {store.dim}), got {queries.shape}")
    order, dist = _scan(store, queries, k)
    return Neighborhood(order, store.seqs[order], store.keys[order], store.labels[order], dist / sigma)


def knn_query(store: Datastore, query, k: int, sigma: float = 1.0) -> Neighborhood:
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1:
        raise InputError("knn_query takes a single query vector")
    nb = knn_query_batch(store, q[None, :], k, sigma)
    return Neighborhood(*(a[0] for a in nb))


def update(store: Datastore, batch) -> Datastore:
    """Apply the store's policy to a batch of ``(key, label)`` pairs.

    ``batch`` is either a list of pairs or a ``(keys, labels)`` array tuple.
    """
    keys, labels = _as_kv(batch, store.dim)
    if store.policy == "fifo" and store.capacity is None:
        raise ConfigurationError("fifo policy requires a capacity")
    if store.policy == "fixed" or keys.shape[0] == 0:
        return store
    seqs = np.arange(store.next_seq, store.next_seq + keys.shape[0])
    all_keys = np.concatenate([store.keys, keys])
    all_labels = np.concatenate([store.labels, labels])
    all_seqs = np.concatenate([store.seqs, seqs])
    if store.policy == "fifo" and all_seqs.shape[0] > store.capacity:
        # entries are stored in seq order, so the oldest sit at the front
        drop = all_seqs.shape[0] - store.capacity
        all_keys, all_labels, all_seqs = all_keys[drop:], all_labels[drop:], all_seqs[drop:]
    return Datastore(all_keys, all_labels, all_seqs, store.dim, store.capacity, store.policy)


def _as_kv(batch, dim: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray) and batch[0].ndim == 2:
        keys, labels = batch
    else:
        pairs = list(batch)
        keys = np.asarray([np.asarray(k, dtype=np.float64) for k, _ in pairs]).reshape(len(pairs), -1) if pairs else np.zeros((0, dim))
        labels = np.asarray([int(v) for _, v in pairs], dtype=np.int64)
    keys = np.asarray(keys, dtype=np.float64)
    if keys.shape[0] and keys.shape[1] != dim:
        raise InputError(f"batch keys have dim {keys.shape[1]}, store expects {dim}")
    return keys.reshape(-1, dim), np.asarray(labels, dtype=np.int64)


def update_with_samples(store: Datastore, model: Model, samples: SampleLike) -> Datastore:
    s = as_samples(samples)
    if len(s) == 0:
        return store
    return update(store, (embed(model, s.X), s.y))


# -- prototype compression -------------------------------------------------


@dataclass(frozen=True, eq=False)
class PrototypeStore:
    projection: np.ndarray  # (p, p') with orthonormal columns
    store: Datastore  # prototypes in the projected space

    @property
    def proj_dim(self) -> int:
        return int(self.projection.shape[1])

    def project(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) @ self.projection

    def __len__(self) -> int:
        return len(self.store)


def principal_directions(X: np.ndarray, n_components: int, seed: int, iters: int = 300, tol: float = 1e-12) -> np.ndarray:
    """Top principal directions of ``X`` by seeded block power (subspace) iteration.

    Columns are orthonormal even when the covariance is rank deficient.
    """
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc
    p = cov.shape[0]
    V, _ = np.linalg.qr(rng_for(seed, "pca").normal(size=(p, n_components)))
    for _ in range(iters):
        W, _ = np.linalg.qr(cov @ V + 1e-12 * V)
        # subspace convergence: V spans the same space as W
        done = np.linalg.norm(W - V @ (V.T @ W)) < tol
        V = W
        if done:
            break
    # order columns by captured variance
    var = np.einsum("ij,ij->j", cov @ V, V)
    return V[:, np.argsort(-var, kind="stable")]


def kmeans(X: np.ndarray, k: int, seed: int, iters: int = 100) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; returns ``(k, d)`` centroids."""
    n = X.shape[0]
    if k >= n:
        return X.copy()
    rng = rng_for(seed, "kmeans")
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        if d2.sum() <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / d2.sum())
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    C = np.array(centers)
    for _ in range(iters):
        assign = np.argmin(((X[:, None, :] - C[None]) ** 2).sum(-1), axis=1)
        new = C.copy()
        for j in range(k):
            members = X[assign == j]
            if members.shape[0]:
                new[j] = members.mean(axis=0)
        if np.allclose(new, C, rtol=0, atol=1e-12):
            C = new
            break
        C = new
    return C


def compress(store: Datastore, num_prototypes: int, proj_dim: int, seed: int = 0) -> PrototypeStore:
    """PCA projection plus per-class k-means prototypes.

    Class budgets are proportional to class counts (largest remainder) and
    never exceed a class's size.
    """
    n = len(store)
    if not 1 <= num_prototypes <= n:
        raise ConfigurationError(f"num_prototypes must lie in [1, {n}], got {num_prototypes}")
    if not 1 <= proj_dim <= store.dim:
        raise ConfigurationError(f"proj_dim must lie in [1, {store.dim}], got {proj_dim}")
    P = principal_directions(store.keys, proj_dim, seed)
    Z = store.keys @ P
    classes, counts = np.unique(store.labels, return_counts=True)
    budgets = np.minimum(largest_remainder(counts, num_prototypes), counts)
    protos, proto_labels = [], []
    for c, b in zip(classes, budgets):
        if b == 0:
            continue
        members = Z[store.labels == c]
        protos.append(kmeans(members, int(b), seed=derive_seed(seed, "class", int(c))))
        proto_labels.append(np.full(int(b), c, dtype=np.int64))
    keys = np.concatenate(protos) if protos else np.zeros((0, proj_dim))
    labels = np.concatenate(proto_labels) if proto_labels else np.zeros(0, np.int64)
    return PrototypeStore(P, Datastore.from_arrays(keys, labels))


# -- serialization ---------------------------------------------------------

_HEADER = struct.Struct("<4sIIQBQ")


def save_datastore(store: Datastore) -> bytes:
    """Little-endian: magic, u32 version, u32 p, u64 count, u8 policy, u64 capacity (0 = unset),
    then per entry u64 insert_seq, u32 label, p x f32 key."""
    head = _HEADER.pack(
        STORE_MAGIC, STORE_VERSION, store.dim, len(store), _POLICY_CODES[store.policy], store.capacity or 0
    )
    row = np.dtype([("seq", "<u8"), ("label", "<u4"), ("key", "<f4", (store.dim,))])
    rows = np.empty(len(store), dtype=row)
    rows["seq"] = store.seqs
    rows["label"] = store.labels
    rows["key"] = store.keys
    return head + rows.tobytes()


def load_datastore(blob: bytes) -> Datastore:
    if len(blob) < _HEADER.size:
        raise FormatError("truncated datastore header")
    magic, version, dim, count, policy, capacity = _HEADER.unpack_from(blob)
    if magic != STORE_MAGIC:
        raise FormatError("bad datastore magic")
    if version != STORE_VERSION:
        raise FormatError(f"unsupported datastore version {version}")
    if policy >= len(POLICIES):
        raise FormatError(f"unknown policy code {policy}")
    row = np.dtype([("seq", "<u8"), ("label", "<u4"), ("key", "<f4", (dim,))])
    if len(blob) != _HEADER.size + count * row.itemsize:
        raise FormatError("datastore length does not match its header")
    rows = np.frombuffer(blob, dtype=row, count=count, offset=_HEADER.size)
    return Datastore(
        rows["key"].astype(np.float64).reshape(count, dim),
        rows["label"].astype(np.int64),
        rows["seq"].astype(np.int64),
        dim,
        capacity or None,
        POLICIES[policy],
    )

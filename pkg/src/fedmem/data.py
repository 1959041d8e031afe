"""Synthetic pools, non-IID partitioners, client splits and drift scenarios."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DegenerateClientError, FormatError
from .samples import Samples
from .seeding import derive_seed, rng_for

MIN_CLIENT_SAMPLES = 3
CLIENT_MAGIC = b"FMCL"
CLIENT_VERSION = 1


@dataclass(frozen=True, eq=False)
class LabeledPool:
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    coarse_of: np.ndarray | None = None  # fine label -> coarse label

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.X.shape[1])

    @property
    def samples(self) -> Samples:
        return Samples(self.X, self.y)


@dataclass(frozen=True, eq=False)
class Partition:
    assignment: np.ndarray  # sample index -> client id
    num_clients: int
    alpha: float
    seed: int
    beta: float | None = None
    # per-client label mixtures drawn by the partitioner (diagnostics only)
    mixtures: dict = field(default_factory=dict)

    def client_indices(self, m: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == m)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.num_clients)


@dataclass(frozen=True, eq=False)
class ClientDataset:
    client_id: int
    train: Samples
    val: Samples
    test: Samples

    @property
    def n(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)


# -- pools -----------------------------------------------------------------


def make_synthetic_pool(
    num_classes: int,
    num_coarse: int,
    samples_per_class: int,
    feature_dim: int,
    seed: int,
    separation: float = 3.0,
    coarse_separation: float | None = None,
) -> LabeledPool:
    """Gaussian blobs, one per fine class, grouped into contiguous coarse blocks.

    Coarse centers are drawn with scale ``coarse_separation`` (defaults to
    ``separation``); each fine mean adds an offset of scale ``separation``
    around its coarse center. Samples have unit isotropic noise, so
    ``separation`` directly controls how much classes overlap.
    """
    for name, val in (
        ("num_classes", num_classes),
        ("num_coarse", num_coarse),
        ("samples_per_class", samples_per_class),
        ("feature_dim", feature_dim),
    ):
        if int(val) <= 0:
            raise ConfigurationError(f"{name} must be positive, got {val}")
    if num_classes % num_coarse:
        raise ConfigurationError(f"num_classes={num_classes} is not divisible by num_coarse={num_coarse}")
    if coarse_separation is None:
        coarse_separation = separation
    rng = rng_for(seed, "pool")
    per_coarse = num_classes // num_coarse
    coarse_centers = rng.normal(scale=coarse_separation, size=(num_coarse, feature_dim))
    coarse_of = np.repeat(np.arange(num_coarse), per_coarse)
    means = coarse_centers[coarse_of] + rng.normal(scale=separation, size=(num_classes, feature_dim))
    y = np.repeat(np.arange(num_classes), samples_per_class)
    X = means[y] + rng.normal(size=(y.shape[0], feature_dim))
    return LabeledPool(X, y, num_classes, coarse_of)


# -- partitioners ----------------------------------------------------------


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``, proportional to ``weights``.

    Floors first, then hands the leftover units to the largest fractional
    parts (lower index wins ties).
    """
    w = np.asarray(weights, dtype=np.float64)
    s = w.sum()
    if total == 0:
        return np.zeros(len(w), dtype=np.int64)
    if not np.isfinite(s) or s <= 0:
        raise ConfigurationError("largest_remainder needs positive finite weights")
    raw = w / s * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.lexsort((np.arange(len(w)), -(raw - counts)))
        counts[order[:short]] += 1
    return counts


def _dirichlet(rng: np.random.Generator, alpha: float, size: int) -> np.ndarray:
    if size == 1:
        return np.ones(1)
    p = rng.dirichlet(np.full(size, float(alpha)))
    if not np.all(np.isfinite(p)) or p.sum() <= 0:
        # gamma draws all underflowed: the limiting distribution is one-hot
        p = np.zeros(size)
        p[rng.integers(size)] = 1.0
    return p


def dirichlet_partition(pool: LabeledPool, M: int, alpha: float, seed: int) -> Partition:
    """Per-label Dirichlet allocation: label y's instances go to clients in proportion p_y ~ Dir(alpha)."""
    if M < 1:
        raise ConfigurationError("M must be >= 1")
    if alpha <= 0:
        raise ConfigurationError("alpha must be positive")
    assignment = np.empty(len(pool), dtype=np.int64)
    mixtures = {}
    for label in range(pool.num_classes):
        idx = np.flatnonzero(pool.y == label)
        if idx.size == 0:
            continue
        rng = rng_for(seed, "dirichlet", label)
        p = _dirichlet(rng, alpha, M)
        mixtures[label] = p
        counts = largest_remainder(p, idx.size)
        idx = rng.permutation(idx)
        assignment[idx] = np.repeat(np.arange(M), counts)
    return Partition(assignment, M, float(alpha), seed, mixtures=mixtures)


def pachinko_partition(pool: LabeledPool, M: int, alpha: float, beta: float, seed: int) -> Partition:
    """Two-level Dirichlet-multinomial allocation over coarse then fine labels.

    Each client draws a coarse mixture ~ Dir(alpha) and, for each coarse
    label, a fine mixture ~ Dir(beta). Clients are filled one at a time up
    to an equal share of the pool, one sample per draw, without
    replacement. When a fine class runs out it is dropped and the client's
    fine mixture is renormalized over what remains; an exhausted coarse
    label is dropped the same way. If every remaining option has zero mass
    under the client's mixture, the draw falls back to remaining counts.
    """
    if pool.coarse_of is None:
        raise ConfigurationError("pachinko partition needs a pool with coarse labels")
    if M < 1:
        raise ConfigurationError("M must be >= 1")
    if alpha <= 0 or beta <= 0:
        raise ConfigurationError("alpha and beta must be positive")
    coarse_of = np.asarray(pool.coarse_of)
    num_coarse = int(coarse_of.max()) + 1
    fine_in = [np.flatnonzero(coarse_of == c) for c in range(num_coarse)]

    shuffle_rng = rng_for(seed, "pachinko", "shuffle")
    remaining = [list(shuffle_rng.permutation(np.flatnonzero(pool.y == f))) for f in range(pool.num_classes)]
    left = np.array([len(r) for r in remaining], dtype=np.int64)

    quotas = largest_remainder(np.ones(M), len(pool))
    assignment = np.empty(len(pool), dtype=np.int64)
    mixtures = {}
    for m in range(M):
        rng = rng_for(seed, "pachinko", m)
        coarse_mix = _dirichlet(rng, alpha, num_coarse)
        fine_mix = [_dirichlet(rng, beta, len(fine_in[c])) for c in range(num_coarse)]
        mixtures[m] = (coarse_mix, fine_mix)
        for _ in range(quotas[m]):
            coarse_left = np.array([left[fine_in[c]].sum() for c in range(num_coarse)])
            c = _draw(rng, coarse_mix, coarse_left)
            fines = fine_in[c]
            j = _draw(rng, fine_mix[c], left[fines])
            f = fines[j]
            assignment[remaining[f].pop()] = m
            left[f] -= 1
    return Partition(assignment, M, float(alpha), seed, beta=float(beta), mixtures=mixtures)


def _draw(rng: np.random.Generator, mix: np.ndarray, left: np.ndarray) -> int:
    w = np.where(left > 0, mix, 0.0)
    if w.sum() <= 0:
        w = left.astype(np.float64)
    return int(rng.choice(len(w), p=w / w.sum()))


# -- client splits ---------------------------------------------------------


def split_counts(n: int, ratios: Sequence[float]) -> np.ndarray:
    """Floor each share, fill empty splits first, then largest fractional parts."""
    r = np.asarray(ratios, dtype=np.float64)
    raw = r * n
    counts = np.floor(raw + 1e-9).astype(np.int64)
    short = n - int(counts.sum())
    for i in range(len(r)):
        if short == 0:
            break
        if counts[i] == 0 and r[i] > 0:
            counts[i] += 1
            short -= 1
    if short > 0:
        frac = raw - np.floor(raw + 1e-9)
        order = np.lexsort((np.arange(len(r)), -frac))
        for i in order[:short]:
            counts[i] += 1
    return counts


def split_client(
    samples: Samples,
    ratios: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    client_id: int = 0,
) -> ClientDataset:
    """Seeded shuffle, then contiguous train/val/test slices."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(samples)
    if n < MIN_CLIENT_SAMPLES:
        raise DegenerateClientError(f"client {client_id} has {n} samples; at least {MIN_CLIENT_SAMPLES} are required")
    counts = split_counts(n, ratios)
    perm = rng_for(seed, "split", client_id).permutation(n)
    a, b = counts[0], counts[0] + counts[1]
    return ClientDataset(client_id, samples.take(perm[:a]), samples.take(perm[a:b]), samples.take(perm[b:]))


def build_clients(
    pool: LabeledPool,
    partition: Partition,
    ratios: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> list[ClientDataset]:
    return [
        split_client(pool.samples.take(partition.client_indices(m)), ratios, seed, client_id=m)
        for m in range(partition.num_clients)
    ]


def partition_with_retry(
    pool: LabeledPool,
    M: int,
    alpha: float,
    seed: int,
    beta: float | None = None,
    min_samples: int = MIN_CLIENT_SAMPLES,
    max_attempts: int = 20,
) -> Partition:
    """Redraw the partition until every client holds ``min_samples``.

    Attempt 0 uses ``seed`` itself, attempt i > 0 a seed derived from it, so
    the result is still a pure function of the arguments. Raises
    ``DegenerateClientError`` once the attempts run out.
    """
    min_samples = max(min_samples, MIN_CLIENT_SAMPLES)
    for attempt in range(max_attempts):
        s = seed if attempt == 0 else derive_seed(seed, "retry", attempt)
        if beta is None:
            part = dirichlet_partition(pool, M, alpha, s)
        else:
            part = pachinko_partition(pool, M, alpha, beta, s)
        if part.sizes().min() >= min_samples:
            return part
    raise DegenerateClientError(
        f"no partition with >= {min_samples} samples per client after {max_attempts} attempts "
        f"(M={M}, alpha={alpha}); lower M or raise the pool size"
    )


# -- drift -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DriftClient:
    client_id: int
    initial: Samples  # seeds the datastore
    pre_batches: list[Samples]  # t0 batches drawn from D_m
    post_batches: list[Samples]  # T - t0 batches drawn from D'_m
    test_before: Samples
    test_after: Samples
    swapped: bool = False


@dataclass(frozen=True, eq=False)
class DriftScenario:
    clients: list[DriftClient]
    t0: int
    T: int
    before: Partition
    after: Partition


def make_drift_scenario(
    pool: LabeledPool,
    M: int,
    alpha: float,
    t0: int,
    T: int,
    seed: int,
    shift_seed: int | None = None,
    train_fraction: float = 0.8,
) -> DriftScenario:
    """Two independent Dirichlet partitions of ``pool`` give each client S_m and S'_m.

    When |S_m| > |S'_m| the two are swapped. Each is split into train/test;
    half of S_m's train part seeds the datastore, the other half is cut
    into ``t0`` batches and S'_m's train part into ``T - t0`` batches.
    Passing ``shift_seed == seed`` makes the shift a no-op.
    """
    if not 0 < t0 < T:
        raise ConfigurationError(f"drift schedule needs 0 < t0 < T, got t0={t0}, T={T}")
    if not 0 < train_fraction < 1:
        raise ConfigurationError("train_fraction must lie in (0, 1)")
    if shift_seed is None:
        shift_seed = derive_seed(seed, "shift")
    before = dirichlet_partition(pool, M, alpha, seed)
    after = dirichlet_partition(pool, M, alpha, shift_seed)
    clients = []
    for m in range(M):
        s = pool.samples.take(before.client_indices(m))
        s_new = pool.samples.take(after.client_indices(m))
        swapped = len(s) > len(s_new)
        if swapped:
            s, s_new = s_new, s
        train, test = _train_test(s, train_fraction, rng_for(seed, "drift", m, "old"))
        train_new, test_new = _train_test(s_new, train_fraction, rng_for(seed, "drift", m, "new"))
        half = len(train) // 2
        rest = len(train) - half
        if half < 1 or rest < t0 or len(train_new) < T - t0 or len(test) < 1 or len(test_new) < 1:
            raise ConfigurationError(
                f"client {m} has too few samples for the drift schedule "
                f"(|S|={len(s)}, |S'|={len(s_new)}, t0={t0}, T={T})"
            )
        initial = train.take(np.arange(half))
        pre = [train.take(ix) for ix in np.array_split(np.arange(half, len(train)), t0)]
        post = [train_new.take(ix) for ix in np.array_split(np.arange(len(train_new)), T - t0)]
        clients.append(DriftClient(m, initial, pre, post, test, test_new, swapped))
    return DriftScenario(clients, t0, T, before, after)


def _train_test(s: Samples, train_fraction: float, rng: np.random.Generator) -> tuple[Samples, Samples]:
    perm = rng.permutation(len(s))
    n_train = int(round(train_fraction * len(s)))
    return s.take(perm[:n_train]), s.take(perm[n_train:])


# -- export ----------------------------------------------------------------


def write_client_file(path: Path, client: ClientDataset, num_classes: int) -> None:
    """Binary client file.

    Layout (little-endian): magic ``FMCL``, u32 version, u32 client id,
    u32 n_train, u32 n_val, u32 n_test, u32 feature dim, u32 num classes,
    then one row per sample (train, val, test order): u32 label followed
    by ``dim`` f32 features.
    """
    dim = client.train.X.shape[1]
    head = struct.pack(
        "<4s7I",
        CLIENT_MAGIC,
        CLIENT_VERSION,
        client.client_id,
        len(client.train),
        len(client.val),
        len(client.test),
        dim,
        num_classes,
    )
    row = np.dtype([("label", "<u4"), ("x", "<f4", (dim,))])
    parts = [head]
    for split in (client.train, client.val, client.test):
        rows = np.empty(len(split), dtype=row)
        rows["label"] = split.y
        rows["x"] = split.X
        parts.append(rows.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_client_file(path: Path) -> tuple[ClientDataset, int]:
    blob = Path(path).read_bytes()
    size = struct.calcsize("<4s7I")
    if len(blob) < size:
        raise FormatError("truncated client file")
    magic, version, cid, n_tr, n_va, n_te, dim, num_classes = struct.unpack_from("<4s7I", blob)
    if magic != CLIENT_MAGIC:
        raise FormatError("bad client file magic")
    if version != CLIENT_VERSION:
        raise FormatError(f"unsupported client file version {version}")
    row = np.dtype([("label", "<u4"), ("x", "<f4", (dim,))])
    n = n_tr + n_va + n_te
    if len(blob) != size + n * row.itemsize:
        raise FormatError("client file length does not match its header")
    rows = np.frombuffer(blob, dtype=row, count=n, offset=size)
    X = rows["x"].astype(np.float64)
    y = rows["label"].astype(np.int64)
    cuts = [0, n_tr, n_tr + n_va, n]
    splits = [Samples(X[a:b], y[a:b]) for a, b in zip(cuts, cuts[1:])]
    return ClientDataset(cid, *splits), num_classes


def label_entropy(labels: np.ndarray, num_classes: int) -> float:
    """Shannon entropy (nats) of a client's empirical label distribution."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes).astype(np.float64)
    if counts.sum() == 0:
        return 0.0
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())

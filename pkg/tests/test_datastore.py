import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmem.datastore import (
    Datastore,
    build_datastore,
    compress,
    kmeans,
    knn_query,
    knn_query_batch,
    load_datastore,
    principal_directions,
    save_datastore,
    update,
    update_with_samples,
)
from fedmem.errors import ConfigurationError, EmptyStoreError, FormatError, InputError
from fedmem.nn import embed, init_model, mlp_spec
from fedmem.samples import Samples


def brute_knn(keys, seqs, q, k):
    """Sort every entry by (distance, seq) with plain Python."""
    rows = []
    for i in range(len(keys)):
        d = math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(q, keys[i])))
        rows.append((d, int(seqs[i]), i))
    rows.sort()
    return rows[:k]


def store_with_seqs(keys, labels, seqs, **kw):
    keys = np.asarray(keys, dtype=float)
    return Datastore(keys, labels, seqs, keys.shape[1], **kw)


def test_hand_example_with_tie():
    store = Datastore.from_arrays([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [3.0, 4.0]], [0, 1, 2, 3])
    nb = knn_query(store, [0.0, 0.0], k=3)
    # the two entries at distance 1 tie; the lower sequence number comes first
    assert nb.indices.tolist() == [0, 1, 2]
    assert nb.distances.tolist() == [0.0, 1.0, 1.0]
    assert nb.labels.tolist() == [0, 1, 2]
    far = knn_query(store, [3.0, 4.0], k=1, sigma=2.0)
    assert far.indices.tolist() == [3] and far.distances.tolist() == [0.0]


def test_tie_break_uses_sequence_not_position():
    store = store_with_seqs([[1.0], [-1.0]], [0, 1], [5, 2])
    assert knn_query(store, [0.0], k=1).labels.tolist() == [1]


@settings(max_examples=100, deadline=None)
@given(
    n=st.integers(1, 25),
    dim=st.integers(1, 4),
    k=st.integers(1, 30),
    seed=st.integers(0, 10_000),
    sigma=st.sampled_from([0.25, 1.0, 3.0]),
)
def test_matches_brute_force(n, dim, k, seed, sigma):
    rng = np.random.default_rng(seed)
    # small integer grid so exact ties are common
    keys = rng.integers(-2, 3, size=(n, dim)).astype(float)
    seqs = np.sort(rng.choice(10 * n + 10, size=n, replace=False))
    store = store_with_seqs(keys, rng.integers(0, 3, n), seqs)
    q = rng.integers(-2, 3, size=dim).astype(float)
    nb = knn_query(store, q, k, sigma)
    expect = brute_knn(keys, seqs, q, k)
    assert nb.indices.tolist() == [i for _, _, i in expect]
    np.testing.assert_allclose(nb.distances, [d / sigma for d, _, _ in expect], rtol=1e-12, atol=1e-12)
    assert len(nb) == min(k, n)


def test_sigma_never_changes_selection():
    rng = np.random.default_rng(0)
    store = Datastore.from_arrays(rng.normal(size=(50, 3)), rng.integers(0, 4, 50))
    qs = rng.normal(size=(10, 3))
    base = knn_query_batch(store, qs, 7, 1.0)
    for sigma in (1e-3, 0.5, 20.0, 1e6):
        nb = knn_query_batch(store, qs, 7, sigma)
        np.testing.assert_array_equal(nb.indices, base.indices)
        np.testing.assert_allclose(nb.distances * sigma, base.distances, rtol=1e-12)


def test_batch_matches_single_queries():
    rng = np.random.default_rng(1)
    store = Datastore.from_arrays(rng.normal(size=(40, 5)), rng.integers(0, 3, 40))
    qs = rng.normal(size=(6, 5))
    nb = knn_query_batch(store, qs, 4)
    for i, q in enumerate(qs):
        one = knn_query(store, q, 4)
        np.testing.assert_array_equal(one.indices, nb.indices[i])
        np.testing.assert_array_equal(one.distances, nb.distances[i])


def test_query_errors():
    store = Datastore.from_arrays([[0.0, 1.0]], [0])
    with pytest.raises(EmptyStoreError):
        knn_query(Datastore.empty(2), [0.0, 0.0], 1)
    with pytest.raises(InputError):
        knn_query(store, [0.0], 1)
    with pytest.raises(ConfigurationError):
        knn_query(store, [0.0, 0.0], 0)
    with pytest.raises(ConfigurationError):
        knn_query(store, [0.0, 0.0], 1, sigma=0.0)


def test_fixed_policy_ignores_updates():
    store = Datastore.from_arrays([[0.0]], [0])
    assert update(store, [([1.0], 1)]) is store


def test_concatenate_appends_with_fresh_sequence_numbers():
    store = Datastore.from_arrays([[0.0], [1.0]], [0, 1], policy="concatenate")
    grown = update(store, [([2.0], 1), ([3.0], 0)])
    assert len(grown) == 4 and grown.seqs.tolist() == [0, 1, 2, 3]
    assert grown.labels.tolist() == [0, 1, 1, 0]
    assert len(store) == 2  # the original is untouched


def test_fifo_evicts_oldest():
    store = Datastore.from_arrays([[0.0], [1.0], [2.0]], [0, 1, 2], capacity=3, policy="fifo")
    out = update(store, [([3.0], 3), ([4.0], 4)])
    assert out.keys[:, 0].tolist() == [2.0, 3.0, 4.0]
    assert out.seqs.tolist() == [2, 3, 4]
    with pytest.raises(ConfigurationError):
        update(Datastore.from_arrays([[0.0]], [0]).with_policy("fifo"), [([1.0], 0)])


@settings(max_examples=50, deadline=None)
@given(capacity=st.integers(1, 8), batches=st.lists(st.integers(0, 6), max_size=8))
def test_fifo_keeps_most_recent(capacity, batches):
    store = Datastore.empty(1, capacity=capacity, policy="fifo")
    inserted = []
    for size in batches:
        pairs = [([float(len(inserted) + j)], 0) for j in range(size)]
        inserted += [p[0][0] for p in pairs]
        store = update(store, pairs)
        assert len(store) <= capacity
    assert store.keys[:, 0].tolist() == inserted[-capacity:] if inserted else len(store) == 0
    assert np.all(np.diff(store.seqs) > 0)


def test_build_datastore_uses_embeddings():
    model = init_model(mlp_spec([3, 5, 4, 2]), seed=0)
    rng = np.random.default_rng(0)
    s = Samples(rng.normal(size=(20, 3)), rng.integers(0, 2, 20))
    store = build_datastore(model, s)
    assert store.dim == model.repr_dim == 4
    np.testing.assert_array_equal(store.keys, embed(model, s.X))
    np.testing.assert_array_equal(store.labels, s.y)
    fifo = build_datastore(model, s, policy="fifo")
    assert fifo.capacity == 20


def test_capacity_subsets_are_nested():
    model = init_model(mlp_spec([2, 3, 2]), seed=0)
    X = np.stack([np.arange(30.0), np.zeros(30)], axis=1)
    s = Samples(X, np.zeros(30, int))
    prev = None
    for frac in (0.1, 0.25, 0.5, 0.9, 1.0):
        store = build_datastore(model, s, capacity_fraction=frac, seed=3)
        assert len(store) == math.ceil(frac * 30 - 1e-9)
        rows = {tuple(k) for k in store.keys}
        if prev is not None:
            assert prev <= rows
        prev = rows
    with pytest.raises(ConfigurationError):
        build_datastore(model, s, capacity_fraction=0.0)


def test_update_with_samples():
    model = init_model(mlp_spec([2, 3, 2]), seed=0)
    s = Samples(np.ones((4, 2)), np.array([0, 1, 0, 1]))
    store = build_datastore(model, s, policy="concatenate")
    grown = update_with_samples(store, model, s)
    assert len(grown) == 8
    assert update_with_samples(store, model, Samples.empty(2)) is store


def test_principal_directions_find_dominant_axis():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(300, 3)) * np.array([10.0, 1.0, 0.1])
    P = principal_directions(X, 2, seed=0)
    np.testing.assert_allclose(P.T @ P, np.eye(2), atol=1e-10)
    assert abs(P[0, 0]) > 0.99 and abs(P[1, 1]) > 0.99


def test_kmeans_recovers_blobs():
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(size=(50, 2)) * 0.1 + [5, 5], rng.normal(size=(50, 2)) * 0.1 - 5])
    C = kmeans(X, 2, seed=0)
    C = C[np.argsort(C[:, 0])]
    np.testing.assert_allclose(C, [[-5, -5], [5, 5]], atol=0.1)
    np.testing.assert_array_equal(kmeans(X[:3], 5, seed=0), X[:3])


def test_compress_budgets_and_labels():
    rng = np.random.default_rng(0)
    labels = np.array([0] * 30 + [1] * 10 + [2] * 2)
    store = Datastore.from_arrays(rng.normal(size=(42, 6)), labels)
    ps = compress(store, 10, 3, seed=0)
    assert len(ps) == 10 and ps.proj_dim == 3
    assert np.bincount(ps.store.labels).tolist() == [7, 2, 1]
    np.testing.assert_allclose(ps.projection.T @ ps.projection, np.eye(3), atol=1e-10)
    assert ps.project(np.zeros((1, 6))).shape == (1, 3)
    with pytest.raises(ConfigurationError):
        compress(store, 0, 3)
    with pytest.raises(ConfigurationError):
        compress(store, 5, 7)


def test_full_budget_compression_keeps_every_point():
    rng = np.random.default_rng(2)
    keys = rng.normal(size=(12, 3))
    store = Datastore.from_arrays(keys, rng.integers(0, 2, 12))
    ps = compress(store, 12, 3, seed=0)
    # a full-rank rotation preserves pairwise distances
    got = np.sort(np.linalg.norm(ps.store.keys[:, None] - ps.store.keys[None], axis=-1).ravel())
    want = np.sort(np.linalg.norm(keys[:, None] - keys[None], axis=-1).ravel())
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_datastore_round_trip():
    rng = np.random.default_rng(0)
    keys = rng.normal(size=(7, 4)).astype(np.float32).astype(np.float64)
    store = store_with_seqs(keys, rng.integers(0, 5, 7), [0, 3, 4, 9, 10, 11, 40], capacity=9, policy="fifo")
    blob = save_datastore(store)
    assert blob[:4] == b"FMDS"
    back = load_datastore(blob)
    np.testing.assert_array_equal(back.keys, store.keys)
    np.testing.assert_array_equal(back.labels, store.labels)
    np.testing.assert_array_equal(back.seqs, store.seqs)
    assert (back.capacity, back.policy, back.dim) == (9, "fifo", 4)
    empty = load_datastore(save_datastore(Datastore.empty(3)))
    assert len(empty) == 0 and empty.capacity is None


def test_datastore_load_rejects_garbage():
    blob = save_datastore(Datastore.from_arrays([[1.0, 2.0]], [1]))
    with pytest.raises(FormatError):
        load_datastore(b"ABCD" + blob[4:])
    with pytest.raises(FormatError):
        load_datastore(blob[:-1])
    with pytest.raises(FormatError):
        load_datastore(blob[:10])

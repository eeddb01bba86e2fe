"""Embedding store, exact and IVF KNN, BM25, and the ranking pipelines."""

import math

import numpy as np
import pytest

from hotelsearch.errors import ContractError, InputError, ParseError
from hotelsearch.retrieval import (EmbeddingStore, InvertedTextIndex,
                                   bm25_search, build_ivf, full_rank, kmeans,
                                   knn_exact, knn_ivf, load_ivf, rerank,
                                   save_ivf)


def fill_store(n, dim, seed=0):
    rng = np.random.default_rng(seed)
    store = EmbeddingStore(dim)
    for i in range(n):
        store.add(f"d{i:04d}", rng.normal(size=dim))
    return store


# ---------------------------------------------------------------------------
# store


def test_store_normalizes_on_insert():
    store = EmbeddingStore(3)
    store.add("a", np.array([3.0, 0.0, 4.0]))
    np.testing.assert_allclose(store.vector("a"), [0.6, 0.0, 0.8], atol=1e-12)


def test_store_rejects_duplicates_zero_vectors_and_bad_width():
    store = EmbeddingStore(3)
    store.add("a", np.ones(3))
    with pytest.raises(InputError):
        store.add("a", np.ones(3))
    with pytest.raises(ContractError):
        store.add("b", np.zeros(3))
    with pytest.raises(InputError):
        store.add("c", np.ones(4))


def test_store_unknown_id():
    store = fill_store(4, 8)
    with pytest.raises(InputError):
        store.vector("nope")


def test_store_save_load_round_trip(tmp_path):
    store = fill_store(20, 16, seed=3)
    path = tmp_path / "store.bin"
    store.save(path)
    loaded = EmbeddingStore.load(path)
    assert loaded.ids == store.ids
    assert loaded.dim == store.dim
    np.testing.assert_array_equal(loaded.vectors, store.vectors)


def test_store_save_is_byte_identical(tmp_path):
    fill_store(10, 8, seed=5).save(tmp_path / "a.bin")
    fill_store(10, 8, seed=5).save(tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_store_load_rejects_bad_magic(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"WRONGMAG" + b"\x00" * 16)
    with pytest.raises(ParseError):
        EmbeddingStore.load(tmp_path / "bad.bin")


# ---------------------------------------------------------------------------
# exact KNN


def test_knn_exact_matches_per_pair_cosine_loop():
    store = fill_store(50, 8, seed=1)
    rng = np.random.default_rng(2)
    for _ in range(10):
        q = rng.normal(size=8)
        ranked = knn_exact(q, store, 5)
        qn = q / np.linalg.norm(q)
        scored = sorted(
            ((doc_id, float(store.vector(doc_id) @ qn)) for doc_id in store.ids),
            key=lambda p: (-p[1], p[0]))
        assert [d for d, _ in ranked.results] == [d for d, _ in scored[:5]]


def test_knn_exact_k_larger_than_store():
    store = fill_store(3, 4)
    assert len(knn_exact(np.ones(4), store, 10).results) == 3


def test_knn_ties_break_by_id():
    store = EmbeddingStore(2)
    store.add("b", np.array([1.0, 0.0]))
    store.add("a", np.array([1.0, 0.0]))
    ranked = knn_exact(np.array([1.0, 0.0]), store, 2)
    assert [d for d, _ in ranked.results] == ["a", "b"]


def test_knn_rejects_zero_query():
    store = fill_store(3, 4)
    with pytest.raises(ContractError):
        knn_exact(np.zeros(4), store, 2)


# ---------------------------------------------------------------------------
# k-means and IVF


def test_kmeans_deterministic_and_partitioning():
    rng = np.random.default_rng(4)
    vectors = rng.normal(size=(100, 8))
    c1, a1 = kmeans(vectors, 5, seed=9)
    c2, a2 = kmeans(vectors, 5, seed=9)
    assert np.array_equal(c1, c2) and np.array_equal(a1, a2)
    assert set(np.unique(a1)) <= set(range(5))


def test_kmeans_separated_clusters_recovered():
    rng = np.random.default_rng(5)
    blobs = np.concatenate([rng.normal(loc=c * 10.0, scale=0.1, size=(20, 4))
                            for c in range(3)])
    _, assign = kmeans(blobs, 3, seed=0)
    # each blob lands in exactly one cluster
    for b in range(3):
        assert len(set(assign[b * 20:(b + 1) * 20])) == 1


def test_kmeans_rejects_too_many_clusters():
    with pytest.raises(InputError):
        kmeans(np.ones((3, 2)), 4, seed=0)


def test_ivf_partition_law():
    """Every stored vector belongs to exactly one inverted list."""
    store = fill_store(80, 8, seed=6)
    index = build_ivf(store, 8, seed=0)
    members = np.concatenate(index.lists)
    assert sorted(members.tolist()) == list(range(80))


def test_ivf_probe_all_equals_exact():
    store = fill_store(60, 8, seed=7)
    index = build_ivf(store, 6, seed=0)
    rng = np.random.default_rng(8)
    for _ in range(10):
        q = rng.normal(size=8)
        exact = knn_exact(q, store, 10)
        approx = knn_ivf(q, index, 10, nprobe=6)
        assert [d for d, _ in exact.results] == [d for d, _ in approx.results]


def test_ivf_recall_at_10_with_quarter_probes():
    """Clustered embeddings (the realistic case): recall@10 >= 0.9 at c/4."""
    rng = np.random.default_rng(9)
    centers = rng.normal(size=(20, 16))
    store = EmbeddingStore(16)
    for i in range(400):
        c_id = i % 20
        store.add(f"d{i:04d}", centers[c_id] + 0.3 * rng.normal(size=16))
    c = 16
    index = build_ivf(store, c, seed=0)
    hits = total = 0
    for _ in range(50):
        q = centers[int(rng.integers(20))] + 0.3 * rng.normal(size=16)
        truth = {d for d, _ in knn_exact(q, store, 10).results}
        got = {d for d, _ in knn_ivf(q, index, 10, nprobe=max(1, c // 4)).results}
        hits += len(truth & got)
        total += len(truth)
    assert hits / total >= 0.9


def test_ivf_expands_probes_when_lists_are_small():
    store = fill_store(20, 4, seed=11)
    index = build_ivf(store, 10, seed=0)
    ranked = knn_ivf(np.ones(4), index, 15, nprobe=1)
    assert len(ranked.results) >= 15


def test_ivf_rejects_bad_nprobe():
    store = fill_store(20, 4, seed=12)
    index = build_ivf(store, 4, seed=0)
    with pytest.raises(InputError):
        knn_ivf(np.ones(4), index, 5, nprobe=0)
    with pytest.raises(InputError):
        knn_ivf(np.ones(4), index, 5, nprobe=9)


def test_ivf_save_load_round_trip(tmp_path):
    store = fill_store(50, 8, seed=13)
    index = build_ivf(store, 5, seed=1)
    save_ivf(index, tmp_path / "ivf.bin")
    loaded = load_ivf(tmp_path / "ivf.bin", store)
    np.testing.assert_array_equal(loaded.centroids, index.centroids)
    assert loaded.default_nprobe == index.default_nprobe
    for a, b in zip(loaded.lists, index.lists):
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# BM25


@pytest.fixture
def bm25():
    return InvertedTextIndex({
        "d1": ["pool", "sauna", "pool"],
        "d2": ["sauna", "garden"],
        "d3": ["garden", "garden", "garden"],
    }, k1=1.2, b=0.75)


def test_bm25_idf_hand_computation(bm25):
    # "pool" appears in 1 of 3 documents
    expected = math.log((3 - 1 + 0.5) / (1 + 0.5))
    assert bm25.idf("pool") == pytest.approx(expected)
    assert bm25.idf("absent") == 0.0


def test_bm25_idf_never_negative():
    index = InvertedTextIndex({f"d{i}": ["common"] for i in range(5)})
    assert index.idf("common") == 0.0


def test_bm25_score_hand_computation(bm25):
    # score of "pool" for d1: idf * tf(k1+1) / (tf + k1(1-b+b*dl/avgdl))
    idf = math.log((3 - 1 + 0.5) / (1 + 0.5))
    tf, dl, avgdl = 2, 3, 8 / 3
    expected = idf * tf * 2.2 / (tf + 1.2 * (1 - 0.75 + 0.75 * dl / avgdl))
    ranked = bm25_search(["pool"], bm25, 3)
    assert ranked.results[0][0] == "d1"
    assert ranked.results[0][1] == pytest.approx(expected)


def test_bm25_duplicate_query_terms_accumulate(bm25):
    one = bm25_search(["sauna"], bm25, 3).results
    two = bm25_search(["sauna", "sauna"], bm25, 3).results
    for (d1, s1), (d2, s2) in zip(one, two):
        assert d1 == d2
        assert s2 == pytest.approx(2 * s1)


def test_bm25_unknown_terms_yield_empty(bm25):
    assert bm25_search(["zzz"], bm25, 3).results == []


# ---------------------------------------------------------------------------
# rerank and full rank


def test_rerank_orders_candidates_by_cosine():
    store = fill_store(30, 8, seed=14)
    rng = np.random.default_rng(15)
    q = rng.normal(size=8)
    candidates = [f"d{i:04d}" for i in (3, 9, 21, 0)]
    ranked = rerank(q, candidates, store)
    assert set(d for d, _ in ranked.results) == set(candidates)
    scores = [s for _, s in ranked.results]
    assert scores == sorted(scores, reverse=True)


def test_rerank_rejects_unknown_candidate_and_empty_list():
    store = fill_store(5, 4)
    with pytest.raises(InputError):
        rerank(np.ones(4), ["missing"], store)
    with pytest.raises(InputError):
        rerank(np.ones(4), [], store)


def test_full_rank_exact_and_via_index_agree_at_full_probe():
    store = fill_store(40, 8, seed=16)
    index = build_ivf(store, 4, seed=0)
    q = np.random.default_rng(17).normal(size=8)
    exact = full_rank(q, store, 10)
    via = full_rank(q, store, 10, index=index, nprobe=4)
    assert [d for d, _ in exact.results] == [d for d, _ in via.results]

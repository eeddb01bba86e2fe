"""Embedding store, exact and IVF approximate KNN, BM25 baseline, re-ranking.

Cosine similarity is computed as dot product over vectors that are
L2-normalized on insert. All ranked lists break ties deterministically:
score descending, then document id ascending.
"""

from __future__ import annotations

import math
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, InputError, ParseError

STORE_MAGIC = b"HSEMBST\x00"
STORE_VERSION = 1


@dataclass
class RankedList:
    query_id: str
    results: list[tuple[str, float]]  # (doc id, score), sorted


def _ranked(query_id: str, pairs: list[tuple[str, float]], k: int) -> RankedList:
    pairs.sort(key=lambda p: (-p[1], p[0]))
    return RankedList(query_id, pairs[:k])


class EmbeddingStore:
    """Fixed-width vector table keyed by document id, unit-normalized rows."""

    def __init__(self, dim: int):
        self.dim = dim
        self.ids: list[str] = []
        self._index: dict[str, int] = {}
        self._rows: list[np.ndarray] = []
        self._matrix: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def add(self, doc_id: str, vector: np.ndarray) -> None:
        vec = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vec.shape[0] != self.dim:
            raise InputError(f"vector width {vec.shape[0]} != store dim {self.dim}")
        if doc_id in self._index:
            raise InputError(f"duplicate document id {doc_id!r}")
        norm = np.linalg.norm(vec)
        if norm < 1e-300:
            raise ContractError(f"zero embedding for document {doc_id!r}")
        self._index[doc_id] = len(self.ids)
        self.ids.append(doc_id)
        self._rows.append(vec / norm)
        self._matrix = None

    @property
    def vectors(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = (np.vstack(self._rows) if self._rows
                            else np.zeros((0, self.dim)))
        return self._matrix

    def vector(self, doc_id: str) -> np.ndarray:
        if doc_id not in self._index:
            raise InputError(f"unknown document id {doc_id!r}")
        return self._rows[self._index[doc_id]]

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(STORE_MAGIC)
            fh.write(struct.pack("<IIQ", STORE_VERSION, self.dim, len(self.ids)))
            for doc_id in self.ids:
                raw = doc_id.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
            fh.write(np.ascontiguousarray(self.vectors, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingStore":
        with open(path, "rb") as fh:
            magic = fh.read(len(STORE_MAGIC))
            if magic != STORE_MAGIC:
                raise ParseError(f"{path}: bad store magic {magic!r}")
            version, dim, count = struct.unpack("<IIQ", fh.read(16))
            if version != STORE_VERSION:
                raise ParseError(f"{path}: unsupported store version {version}")
            store = cls(dim)
            ids = []
            for _ in range(count):
                (n,) = struct.unpack("<H", fh.read(2))
                ids.append(fh.read(n).decode("utf-8"))
            payload = fh.read(count * dim * 8)
            if len(payload) != count * dim * 8:
                raise ParseError(f"{path}: truncated vector payload")
            matrix = np.frombuffer(payload, dtype="<f8").reshape(count, dim)
            for doc_id, row in zip(ids, matrix):
                store._index[doc_id] = len(store.ids)
                store.ids.append(doc_id)
                store._rows.append(row.copy())
            return store


def _normalize_query(q: np.ndarray, dim: int) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != dim:
        raise InputError(f"query width {q.shape[0]} != store dim {dim}")
    norm = np.linalg.norm(q)
    if norm < 1e-300:
        raise ContractError("zero query embedding")
    return q / norm


def knn_exact(query: np.ndarray, store: EmbeddingStore, k: int,
              query_id: str = "q") -> RankedList:
    """Full-scan top-k by cosine; the oracle for every approximate path."""
    qn = _normalize_query(query, store.dim)
    scores = store.vectors @ qn
    pairs = list(zip(store.ids, scores.tolist()))
    return _ranked(query_id, pairs, k)


# ---------------------------------------------------------------------------
# IVF index


def kmeans(vectors: np.ndarray, c: int, seed: int, iterations: int = 25
           ) -> tuple[np.ndarray, np.ndarray]:
    """Seeded Lloyd's algorithm; returns (centroids, assignment).

    Empty clusters are re-seeded with the point farthest from its centroid,
    keeping the run deterministic.
    """
    n = vectors.shape[0]
    if not (1 <= c <= n):
        raise InputError(f"cannot build {c} clusters from {n} vectors")
    rng = np.random.default_rng(np.random.PCG64(seed))
    centroids = vectors[rng.choice(n, size=c, replace=False)].copy()
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iterations):
        dists = ((vectors[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2) \
            if n * c <= 2_000_000 else None
        if dists is None:
            # blockwise distance computation for large problems
            dists = np.empty((n, c))
            for start in range(0, n, 1024):
                block = vectors[start:start + 1024]
                dists[start:start + 1024] = (
                    (block**2).sum(axis=1, keepdims=True)
                    - 2.0 * block @ centroids.T
                    + (centroids**2).sum(axis=1))
        assign = dists.argmin(axis=1)
        for j in range(c):
            members = vectors[assign == j]
            if len(members) == 0:
                worst = dists[np.arange(n), assign].argmax()
                centroids[j] = vectors[worst]
                assign[worst] = j
            else:
                centroids[j] = members.mean(axis=0)
    return centroids, assign


@dataclass
class IvfIndex:
    centroids: np.ndarray            # (c, dim)
    lists: list[np.ndarray]          # centroid -> member row indices
    store: EmbeddingStore
    default_nprobe: int = 1


def build_ivf(store: EmbeddingStore, c: int, seed: int = 0,
              iterations: int = 25) -> IvfIndex:
    centroids, assign = kmeans(store.vectors, c, seed, iterations)
    lists = [np.flatnonzero(assign == j) for j in range(c)]
    return IvfIndex(centroids, lists, store, default_nprobe=max(1, c // 4))


def knn_ivf(query: np.ndarray, index: IvfIndex, k: int,
            nprobe: int | None = None, query_id: str = "q") -> RankedList:
    """Scan the inverted lists of the nprobe nearest centroids.

    Expands the probe set if the probed lists hold fewer than k candidates.
    """
    store = index.store
    c = len(index.lists)
    nprobe = index.default_nprobe if nprobe is None else nprobe
    if not (1 <= nprobe <= c):
        raise InputError(f"nprobe {nprobe} outside [1, {c}]")
    qn = _normalize_query(query, store.dim)
    cd = ((index.centroids - qn) ** 2).sum(axis=1)
    order = np.argsort(cd, kind="stable")
    probes = nprobe
    while True:
        candidates = np.concatenate([index.lists[j] for j in order[:probes]]) \
            if probes else np.array([], dtype=np.int64)
        if len(candidates) >= k or probes >= c:
            break
        probes += 1
    scores = store.vectors[candidates] @ qn
    pairs = [(store.ids[i], s) for i, s in zip(candidates.tolist(), scores.tolist())]
    return _ranked(query_id, pairs, k)


IVF_MAGIC = b"HSIVFIX\x00"


def save_ivf(index: IvfIndex, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(IVF_MAGIC)
        c, dim = index.centroids.shape
        fh.write(struct.pack("<IIII", STORE_VERSION, c, dim, index.default_nprobe))
        fh.write(np.ascontiguousarray(index.centroids, dtype="<f8").tobytes())
        for members in index.lists:
            fh.write(struct.pack("<I", len(members)))
            fh.write(np.ascontiguousarray(members, dtype="<u4").tobytes())


def load_ivf(path: str | Path, store: EmbeddingStore) -> IvfIndex:
    with open(path, "rb") as fh:
        magic = fh.read(len(IVF_MAGIC))
        if magic != IVF_MAGIC:
            raise ParseError(f"{path}: bad index magic {magic!r}")
        version, c, dim, nprobe = struct.unpack("<IIII", fh.read(16))
        if version != STORE_VERSION:
            raise ParseError(f"{path}: unsupported index version {version}")
        if dim != store.dim:
            raise ParseError(f"{path}: index dim {dim} != store dim {store.dim}")
        centroids = np.frombuffer(fh.read(c * dim * 8), dtype="<f8").reshape(c, dim).copy()
        lists = []
        for _ in range(c):
            (n,) = struct.unpack("<I", fh.read(4))
            lists.append(np.frombuffer(fh.read(4 * n), dtype="<u4").astype(np.int64))
        return IvfIndex(centroids, lists, store, default_nprobe=nprobe)


# ---------------------------------------------------------------------------
# BM25 baseline


class InvertedTextIndex:
    """Okapi BM25 over document token sequences."""

    def __init__(self, doc_tokens: dict[str, list[str]],
                 k1: float = 1.2, b: float = 0.75):
        self.k1 = k1
        self.b = b
        self.doc_ids = list(doc_tokens.keys())
        self.doc_len = {d: len(toks) for d, toks in doc_tokens.items()}
        self.n_docs = len(self.doc_ids)
        self.avgdl = (sum(self.doc_len.values()) / self.n_docs) if self.n_docs else 0.0
        self.postings: dict[str, list[tuple[str, int]]] = {}
        for doc_id, toks in doc_tokens.items():
            for term, tf in sorted(Counter(toks).items()):
                self.postings.setdefault(term, []).append((doc_id, tf))

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        if df == 0:
            return 0.0
        return max(0.0, math.log((self.n_docs - df + 0.5) / (df + 0.5)))

    def search(self, query_tokens: list[str], k: int,
               query_id: str = "q") -> RankedList:
        if not query_tokens:
            return RankedList(query_id, [])
        scores: dict[str, float] = {}
        for term in query_tokens:  # duplicates accumulate per occurrence
            idf = self.idf(term)
            if idf == 0.0:
                continue
            for doc_id, tf in self.postings[term]:
                dl = self.doc_len[doc_id]
                denom = tf + self.k1 * (1 - self.b + self.b * dl / self.avgdl)
                scores[doc_id] = scores.get(doc_id, 0.0) + idf * tf * (self.k1 + 1) / denom
        return _ranked(query_id, list(scores.items()), k)


def bm25_search(query_tokens: list[str], index: InvertedTextIndex, k: int,
                query_id: str = "q") -> RankedList:
    return index.search(query_tokens, k, query_id)


# ---------------------------------------------------------------------------
# ranking pipelines


def rerank(query_vector: np.ndarray, candidate_ids: list[str],
           store: EmbeddingStore, query_id: str = "q",
           k: int | None = None) -> RankedList:
    """Re-score a fixed candidate list by cosine against stored embeddings."""
    if not candidate_ids:
        raise InputError("empty candidate list")
    qn = _normalize_query(query_vector, store.dim)
    pairs = [(doc_id, float(store.vector(doc_id) @ qn)) for doc_id in candidate_ids]
    return _ranked(query_id, pairs, k if k is not None else len(pairs))


def full_rank(query_vector: np.ndarray, store: EmbeddingStore, k: int,
              query_id: str = "q", index: IvfIndex | None = None,
              nprobe: int | None = None) -> RankedList:
    """Rank the entire store, exactly or through the IVF index."""
    if index is not None:
        return knn_ivf(query_vector, index, k, nprobe, query_id)
    return knn_exact(query_vector, store, k, query_id)

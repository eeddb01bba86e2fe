"""End-to-end pipeline stages shared by the CLI and the acceptance suite.

Every stage writes its outputs plus the effective configuration and seed to
its output directory, so each artifact is reproducible on its own.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import no_grad
from .config import RunConfig
from .corpus import (HotelDocument, QueryRecord, build_catalogs,
                     build_vocabulary, generate_corpus, generate_queries,
                     load_corpus, load_queries, read_tensor, save_corpus,
                     save_queries)
from .errors import InputError
from .evaluation import (MetricReport, latency_bench, mrr_at_10, ndcg_at_10,
                         paired_significance, save_qrels, save_run)
from .fusion import RetrievalModel
from .objectives import LossWeights
from .retrieval import (EmbeddingStore, InvertedTextIndex, IvfIndex, RankedList,
                        build_ivf, full_rank, knn_exact, rerank)
from .textmodel import Vocabulary, tokenize
from .trainer import (TrainHistory, fit, load_checkpoint, save_checkpoint)


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.yaml")
    (out_dir / "seed.txt").write_text(f"{cfg.seed}\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# data


def generate_data(cfg: RunConfig, out_dir: str | Path) -> None:
    out = Path(out_dir)
    _echo_config(cfg, out)
    corpus_cfg = cfg.corpus_config()
    catalogs = build_catalogs(corpus_cfg)
    docs = generate_corpus(corpus_cfg, catalogs)
    queries = generate_queries(docs, corpus_cfg, catalogs)
    save_corpus(docs, out)
    save_queries(queries, out / "queries.jsonl")
    build_vocabulary(catalogs).save(out / "vocab.txt")
    for split in ("train", "val", "test"):
        qrels = {q.id: set(q.relevant_ids) for q in queries if q.split == split}
        save_qrels(qrels, out / f"qrels.{split}.txt")


class Dataset:
    """Loaded corpus directory: documents, queries, vocabulary."""

    def __init__(self, data_dir: str | Path, n_facilities: int = 120):
        self.root = Path(data_dir)
        self.docs = load_corpus(self.root, n_facilities=n_facilities)
        self.queries = load_queries(self.root / "queries.jsonl")
        self.vocab = Vocabulary.load(self.root / "vocab.txt")
        self.by_id = {d.id: d for d in self.docs}

    def split(self, split: str, qtype: str | None = None) -> list[QueryRecord]:
        return [q for q in self.queries
                if q.split == split and (qtype is None or q.qtype == qtype)]

    def qrels(self, queries: list[QueryRecord]) -> dict[str, set[str]]:
        return {q.id: set(q.relevant_ids) for q in queries}


# ---------------------------------------------------------------------------
# training


def train_model(cfg: RunConfig, data: Dataset, out_dir: str | Path | None = None,
                visual_mode: str | None = None,
                weights: LossWeights | None = None,
                shared_lr: float | None = None,
                verbose: bool = False) -> tuple[RetrievalModel, TrainHistory]:
    model = RetrievalModel(cfg.model_config(visual_mode=visual_mode), data.vocab)
    history = fit(
        model,
        train_queries=data.split("train"),
        val_queries=data.split("val"),
        docs=data.docs,
        config=cfg.optimizer_config(shared_lr=shared_lr),
        weights=weights if weights is not None else cfg.loss_weights(),
        val_pool_size=cfg.val_pool_size,
        val_query_limit=cfg.val_query_limit,
        temperature=cfg.retrieval_temperature,
        hard_negatives=cfg.hard_negatives,
        verbose=verbose)
    if out_dir is not None:
        out = Path(out_dir)
        _echo_config(cfg, out)
        save_checkpoint(model, out / "checkpoint.bin")
        history.save(out / "history.json")
    return model, history


def load_model(cfg: RunConfig, data: Dataset, checkpoint: str | Path,
               visual_mode: str | None = None) -> RetrievalModel:
    model = RetrievalModel(cfg.model_config(visual_mode=visual_mode), data.vocab)
    load_checkpoint(model, checkpoint)
    return model


# ---------------------------------------------------------------------------
# embedding and search


def doc_text_ids(model: RetrievalModel, doc: HotelDocument) -> list[int]:
    return [model.vocab.id_of(t) for t in doc.description]


def embed_corpus(model: RetrievalModel, docs: list[HotelDocument],
                 visual_mode: str | None = None) -> EmbeddingStore:
    """Embed every document into a store, streaming galleries from disk."""
    store = EmbeddingStore(model.config.llm.dim)
    with no_grad():
        for doc in sorted(docs, key=lambda d: d.id):
            if doc.gallery is not None:
                gallery = doc.gallery
            else:
                gallery = read_tensor(doc.gallery_path)
            out = model.embed_document(doc_text_ids(model, doc), gallery,
                                       mode=visual_mode)
            store.add(doc.id, out["d"].data)
    return store


def search_queries(model: RetrievalModel, queries: list[QueryRecord],
                   store: EmbeddingStore, k: int,
                   index: IvfIndex | None = None,
                   nprobe: int | None = None) -> list[RankedList]:
    runs = []
    with no_grad():
        for q in queries:
            vec = model.embed_query(q.text).data
            runs.append(full_rank(vec, store, k, query_id=q.id,
                                  index=index, nprobe=nprobe))
    return runs


def rerank_queries(model: RetrievalModel, queries: list[QueryRecord],
                   candidates: dict[str, list[str]], store: EmbeddingStore,
                   k: int | None = None) -> list[RankedList]:
    runs = []
    with no_grad():
        for q in queries:
            if q.id not in candidates:
                raise InputError(f"no candidate list for query {q.id}")
            vec = model.embed_query(q.text).data
            runs.append(rerank(vec, candidates[q.id], store, query_id=q.id, k=k))
    return runs


def bm25_index(data: Dataset) -> InvertedTextIndex:
    return InvertedTextIndex({d.id: list(d.description) for d in data.docs})


def bm25_runs(index: InvertedTextIndex, vocab: Vocabulary,
              queries: list[QueryRecord], k: int) -> list[RankedList]:
    runs = []
    for q in queries:
        seq = tokenize(q.text, vocab)
        tokens = [vocab.token_of(i) for i in seq.ids]
        runs.append(index.search(tokens, k, query_id=q.id))
    return runs


# ---------------------------------------------------------------------------
# evaluation


def evaluate_runs(runs: list[RankedList],
                  qrels: dict[str, set[str]]) -> dict[str, MetricReport]:
    return {
        "mrr_at_10": mrr_at_10(runs, qrels),
        "ndcg_at_10": ndcg_at_10(runs, qrels),
    }


def metrics_by_type(model: RetrievalModel, data: Dataset, store: EmbeddingStore,
                    split: str = "test", k: int = 100) -> dict[str, dict]:
    """Full-ranking metrics for each query type of a split."""
    out = {}
    for qtype in ("multimodal", "vision-driven", "text-driven",
                  "out-of-distribution"):
        queries = data.split(split, qtype)
        if not queries:
            continue
        runs = search_queries(model, queries, store, k)
        reports = evaluate_runs(runs, data.qrels(queries))
        out[qtype] = {
            "mrr_at_10": reports["mrr_at_10"].mean,
            "ndcg_at_10": reports["ndcg_at_10"].mean,
            "per_query_mrr": reports["mrr_at_10"].per_query,
            "n_queries": reports["mrr_at_10"].query_count,
        }
    return out


def render_table(rows: list[dict], columns: list[str]) -> str:
    """Aligned text table: one row per configuration, one column per metric."""
    widths = {c: max(len(c), *(len(str(r.get(c, ""))) for r in rows)) for c in columns}
    header = "  ".join(c.ljust(widths[c]) for c in columns)
    sep = "  ".join("-" * widths[c] for c in columns)
    body = ["  ".join(str(r.get(c, "")).ljust(widths[c]) for c in columns)
            for r in rows]
    return "\n".join([header, sep] + body)


# ---------------------------------------------------------------------------
# latency


def latency_comparison(cfg: RunConfig, data: Dataset, model: RetrievalModel,
                       store: EmbeddingStore, queries: list[QueryRecord],
                       warmup: int | None = None, reps: int | None = None):
    """Asymmetric (small-tower query) path vs symmetric large-tower path."""

    def slm_path(q: QueryRecord):
        with no_grad():
            vec = model.embed_query(q.text).data
            return knn_exact(vec, store, 10, query_id=q.id)

    def llm_path(q: QueryRecord):
        with no_grad():
            seq = tokenize(q.text, model.vocab)
            if len(seq) == 0:
                raise InputError(f"empty query {q.id}")
            hidden = model.llm.encode(seq)
            from .textmodel import pool
            vec = pool(hidden, model.config.llm.pooling).data
            return knn_exact(vec, store, 10, query_id=q.id)

    return latency_bench(
        {"slm-query": slm_path, "llm-query": llm_path},
        queries,
        warmup=warmup if warmup is not None else cfg.bench_warmup,
        reps=reps if reps is not None else cfg.bench_reps)

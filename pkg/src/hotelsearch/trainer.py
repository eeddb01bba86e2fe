"""Joint optimization of both towers with per-group learning rates.

Default optimizer is SGD with momentum 0.9 (an Adam-style optimizer sits
behind a flag). Negatives are in-batch: the positive documents of the other
queries in the batch. Early stopping counts validation steps without
improvement; the best checkpoint is retained.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, no_grad
from .corpus import HotelDocument, QueryRecord
from .errors import ConfigError, InputError, NumericError, ParseError
from .evaluation import mrr_at_10
from .fusion import RetrievalModel
from .objectives import (LossWeights, final_loss, mlm_loss,
                         retrieval_loss_batch, visf_loss_gallery)
from .retrieval import EmbeddingStore, knn_exact
from .textmodel import tokenize

CHECKPOINT_MAGIC = b"HSCKPT\x00\x00"
CHECKPOINT_VERSION = 1

DEFAULT_RATES = {"SLM": 5e-4, "LLM": 5e-6}


@dataclass
class OptimizerConfig:
    lr_by_group: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_RATES))
    batch_size: int = 8
    max_epochs: int = 10
    max_steps: int | None = None
    momentum: float = 0.9
    clip_norm: float = 5.0
    optimizer: str = "sgd"  # or "adam"
    patience: int = 5       # validation steps without improvement
    validation_interval: int = 50
    seed: int = 0

    def rate(self, group: str) -> float:
        # projection / heads / vision default to the LLM rate
        if group in self.lr_by_group:
            return self.lr_by_group[group]
        return self.lr_by_group["LLM"]

    def __post_init__(self):
        if "SLM" not in self.lr_by_group or "LLM" not in self.lr_by_group:
            raise ConfigError("lr_by_group needs at least SLM and LLM rates")
        for group, lr in self.lr_by_group.items():
            if lr <= 0:
                raise ConfigError(f"learning rate for {group} must be > 0, got {lr}")


@dataclass
class TrainHistory:
    steps: list[dict] = field(default_factory=list)
    validations: list[dict] = field(default_factory=list)

    def record_step(self, step: int, losses: dict[str, float], wall: float):
        self.steps.append({"step": step, **losses, "wall_clock": wall})

    def record_validation(self, step: int, mrr: float):
        self.validations.append({"step": step, "val_mrr_at_10": mrr})

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(
            {"steps": self.steps, "validations": self.validations},
            sort_keys=True, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TrainHistory":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(steps=data["steps"], validations=data["validations"])


def make_param_groups(model: RetrievalModel,
                      config: OptimizerConfig) -> dict[str, list[Parameter]]:
    """Partition all trainable parameters by group tag."""
    groups: dict[str, list[Parameter]] = {}
    for p in model.parameters():
        if p.group not in Parameter.GROUPS:
            raise ConfigError(f"parameter {p.name} has unknown group {p.group!r}")
        if model.config.freeze_vision and p.group == "vision":
            continue
        groups.setdefault(p.group, []).append(p)
    return groups


class Optimizer:
    def __init__(self, groups: dict[str, list[Parameter]], config: OptimizerConfig):
        self.groups = groups
        self.config = config
        self.velocity = {p.name: np.zeros_like(p.data)
                         for params in groups.values() for p in params}
        # Adam state, allocated lazily only when used
        self.m = {}
        self.v = {}
        self.t = 0

    def _all_params(self):
        for group, params in self.groups.items():
            for p in params:
                yield group, p

    def clip_gradients(self) -> float:
        total = 0.0
        for _, p in self._all_params():
            if p.tensor.grad is not None:
                total += float((p.tensor.grad**2).sum())
        norm = np.sqrt(total)
        if self.config.clip_norm and norm > self.config.clip_norm:
            scale = self.config.clip_norm / norm
            for _, p in self._all_params():
                if p.tensor.grad is not None:
                    p.tensor.grad *= scale
        return float(norm)

    def step(self):
        self.t += 1
        for group, p in self._all_params():
            g = p.tensor.grad
            if g is None:
                continue
            lr = self.config.rate(group)
            if self.config.optimizer == "sgd":
                vel = self.velocity[p.name]
                vel *= self.config.momentum
                vel += g
                p.tensor.data -= lr * vel
            elif self.config.optimizer == "adam":
                b1, b2, eps = 0.9, 0.999, 1e-8
                m = self.m.setdefault(p.name, np.zeros_like(p.data))
                v = self.v.setdefault(p.name, np.zeros_like(p.data))
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                mhat = m / (1 - b1**self.t)
                vhat = v / (1 - b2**self.t)
                p.tensor.data -= lr * mhat / (np.sqrt(vhat) + eps)
            else:
                raise ConfigError(f"unknown optimizer {self.config.optimizer!r}")

    def zero_grad(self):
        for _, p in self._all_params():
            p.zero_grad()


@dataclass
class TrainItem:
    """One (query, positive document) pair prepared for a forward pass.

    ``negatives`` are optional extra documents added to the batch's candidate
    pool on top of the in-batch negatives; sampling near-misses (same city or
    overlapping facilities) sharpens the discriminative signal.
    """
    query_text: str
    doc: HotelDocument
    negatives: list[HotelDocument] = field(default_factory=list)


def _doc_text_ids(model: RetrievalModel, doc: HotelDocument) -> list[int]:
    return [model.vocab.id_of(t) for t in doc.description]


def _embed_doc(model: RetrievalModel, doc: HotelDocument,
               visual_mode: str | None = None,
               mask_positions: set[int] | None = None,
               feature_cache: dict[str, np.ndarray] | None = None) -> dict:
    """Forward one document, reusing cached visual features when available.

    The cache is only valid while the vision encoder is frozen: its entries
    are pre-projection block rows, constant per document in that regime.
    """
    if feature_cache is not None:
        feats = feature_cache.get(doc.id)
        if feats is None:
            with no_grad():
                gallery = model.encode_gallery(doc.load_gallery())
                feats = model.visual_features(gallery, visual_mode)
            feature_cache[doc.id] = feats
        return model.embed_document(_doc_text_ids(model, doc), None,
                                    mode=visual_mode,
                                    mask_positions=mask_positions,
                                    visual_features=feats)
    return model.embed_document(_doc_text_ids(model, doc), doc.load_gallery(),
                                mode=visual_mode, mask_positions=mask_positions)


def train_step(items: list[TrainItem], model: RetrievalModel, opt: Optimizer,
               weights: LossWeights, visual_mode: str | None = None,
               temperature: float = 1.0,
               feature_cache: dict[str, np.ndarray] | None = None) -> dict[str, float]:
    """One optimization step over an aligned batch; returns loss components."""
    if len(items) < 2:
        raise InputError("batch size must be >= 2 for in-batch negatives")
    opt.zero_grad()
    queries = ad.concat_rows([model.embed_query(it.query_text) for it in items])
    doc_outs = [_embed_doc(model, it.doc, visual_mode,
                           feature_cache=feature_cache) for it in items]
    docs = ad.concat_rows([out["d"] for out in doc_outs])

    positive_ids = {it.doc.id for it in items}
    extra_docs: dict[str, HotelDocument] = {}
    for it in items:
        for neg in it.negatives:
            if neg.id not in positive_ids:
                extra_docs.setdefault(neg.id, neg)
    extras = None
    if extra_docs:
        extras = ad.concat_rows(
            [_embed_doc(model, d, visual_mode, feature_cache=feature_cache)["d"]
             for d in extra_docs.values()])

    l_ret = retrieval_loss_batch(queries, docs, extra_negatives=extras,
                                 temperature=temperature)
    zero = Tensor([[0.0]])

    l_mlm = zero
    if weights.mlm > 0.0:
        per_doc = []
        for it in items:
            text_ids = _doc_text_ids(model, it.doc)
            out = _embed_doc(model, it.doc, visual_mode, mask_positions={0, 1},
                             feature_cache=feature_cache)
            positions = [out["text_offset"], out["text_offset"] + 1]
            logits = model.mlm_head.logits(ad.gather_rows(out["hidden"], positions))
            per_doc.append(mlm_loss(logits, text_ids[:2], [0, 1]))
        l_mlm = ad.smul(ad.tree_sum(per_doc), 1.0 / len(per_doc))

    l_visf = zero
    if weights.visf > 0.0:
        # facility supervision reads the visual block rows; documents embedded
        # without a gallery (visual mode "none") carry no visual evidence and
        # contribute nothing to this term
        blocks = [(out["visual_block"], it.doc.facilities)
                  for it, out in zip(items, doc_outs)
                  if out["visual_block"] is not None]
        if blocks:
            labels = np.stack([b[1] for b in blocks]).astype(np.float64)
            l_visf = visf_loss_gallery([b[0] for b in blocks],
                                       model.facility_head, labels)

    loss = final_loss(l_ret, l_mlm, l_visf, weights)
    components = {
        "l_ret": l_ret.item(), "l_mlm": l_mlm.item(),
        "l_visf": l_visf.item(), "l_final": loss.item(),
    }
    for name, value in components.items():
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss component {name}")
    ad.backward(loss)
    opt.clip_gradients()
    opt.step()
    return components


# ---------------------------------------------------------------------------
# validation


def build_validation_pool(queries: list[QueryRecord], docs: list[HotelDocument],
                          pool_size: int, seed: int) -> list[HotelDocument]:
    """All relevant documents of the validation queries plus random distractors."""
    needed: set[str] = set()
    for q in queries:
        needed.update(q.relevant_ids)
    by_id = {d.id: d for d in docs}
    pool_ids = sorted(needed)
    rng = np.random.default_rng(np.random.PCG64(seed))
    rest = sorted(set(by_id) - needed)
    extra = max(0, pool_size - len(pool_ids))
    if extra and rest:
        picks = rng.choice(len(rest), size=min(extra, len(rest)), replace=False)
        pool_ids.extend(rest[int(i)] for i in sorted(picks))
    return [by_id[i] for i in sorted(pool_ids)]


def embed_pool(model: RetrievalModel, pool: list[HotelDocument],
               visual_mode: str | None = None,
               feature_cache: dict[str, np.ndarray] | None = None) -> EmbeddingStore:
    store = EmbeddingStore(model.config.llm.dim)
    with no_grad():
        for doc in pool:
            out = _embed_doc(model, doc, visual_mode,
                             feature_cache=feature_cache)
            store.add(doc.id, out["d"].data)
    return store


def validation_mrr(model: RetrievalModel, queries: list[QueryRecord],
                   pool: list[HotelDocument],
                   visual_mode: str | None = None,
                   feature_cache: dict[str, np.ndarray] | None = None) -> float:
    store = embed_pool(model, pool, visual_mode, feature_cache=feature_cache)
    pool_ids = set(store.ids)
    runs = []
    qrels = {}
    with no_grad():
        for q in queries:
            relevant = set(q.relevant_ids) & pool_ids
            if not relevant:
                continue
            vec = model.embed_query(q.text).data
            runs.append(knn_exact(vec, store, 10, query_id=q.id))
            qrels[q.id] = relevant
    if not runs:
        return 0.0
    return mrr_at_10(runs, qrels).mean


# ---------------------------------------------------------------------------
# fit


def _near_miss_sampler(docs: list[HotelDocument]):
    """Sampler for documents that resemble a positive without being relevant.

    Candidates share the positive's city or at least one of its facilities;
    a plain random document is the fallback when no near-miss exists.
    """
    by_city: dict[str, list[int]] = {}
    by_facility: dict[int, list[int]] = {}
    for i, d in enumerate(docs):
        by_city.setdefault(d.city, []).append(i)
        for fid in np.flatnonzero(d.facilities):
            by_facility.setdefault(int(fid), []).append(i)

    def sample(rng, positive: HotelDocument, relevant: set[str],
               count: int) -> list[HotelDocument]:
        pools = [by_city.get(positive.city, [])]
        pools += [by_facility[int(f)] for f in np.flatnonzero(positive.facilities)]
        out: list[HotelDocument] = []
        seen: set[str] = set()
        for _ in range(8 * count):
            if len(out) >= count:
                break
            pool = pools[int(rng.integers(len(pools)))]
            cand = docs[pool[int(rng.integers(len(pool)))]] if pool else \
                docs[int(rng.integers(len(docs)))]
            if cand.id in relevant or cand.id in seen:
                continue
            seen.add(cand.id)
            out.append(cand)
        return out

    return sample


def fit(model: RetrievalModel, train_queries: list[QueryRecord],
        val_queries: list[QueryRecord], docs: list[HotelDocument],
        config: OptimizerConfig, weights: LossWeights,
        val_pool_size: int = 300, val_query_limit: int = 100,
        temperature: float = 1.0, hard_negatives: int = 0,
        verbose: bool = False) -> TrainHistory:
    """Train until max epochs, max steps, or early stopping.

    ``hard_negatives`` near-miss documents (same city or a shared facility as
    the positive, excluding the query's relevant set) are added per batch item
    as extra contrastive negatives.

    The model is left holding the parameters of its best validation MRR@10.
    """
    if not train_queries or not docs:
        raise InputError("empty training set")
    by_id = {d.id: d for d in docs}
    rng = np.random.default_rng(np.random.PCG64(config.seed))
    sample_negatives = (_near_miss_sampler(docs) if hard_negatives > 0
                        else None)
    val_used = val_queries[:val_query_limit]
    pool = build_validation_pool(val_used, docs, val_pool_size, config.seed)
    # with the vision encoder frozen the pre-projection visual features are
    # constant per document, so they are computed once and reused every step
    feature_cache: dict[str, np.ndarray] | None = (
        {} if model.config.freeze_vision else None)

    opt = Optimizer(make_param_groups(model, config), config)
    history = TrainHistory()
    best_mrr = -1.0
    best_params: dict[str, np.ndarray] = {}
    stale = 0
    step = 0
    start = time.monotonic()
    stop = False

    for _epoch in range(config.max_epochs):
        order = rng.permutation(len(train_queries))
        for lo in range(0, len(order) - config.batch_size + 1, config.batch_size):
            batch_idx = order[lo:lo + config.batch_size]
            items = []
            for qi in batch_idx:
                q = train_queries[int(qi)]
                pos_id = q.relevant_ids[int(rng.integers(len(q.relevant_ids)))]
                negs = (sample_negatives(rng, by_id[pos_id],
                                         set(q.relevant_ids), hard_negatives)
                        if sample_negatives else [])
                items.append(TrainItem(q.text, by_id[pos_id], negs))
            losses = train_step(items, model, opt, weights,
                                temperature=temperature,
                                feature_cache=feature_cache)
            step += 1
            history.record_step(step, losses, time.monotonic() - start)
            if step % config.validation_interval == 0:
                mrr = validation_mrr(model, val_used, pool,
                                     feature_cache=feature_cache)
                history.record_validation(step, mrr)
                if verbose:
                    print(f"step {step}: l_final={losses['l_final']:.4f} "
                          f"val MRR@10={mrr:.4f}")
                if mrr > best_mrr:
                    best_mrr = mrr
                    best_params = {p.name: p.data.copy() for p in model.parameters()}
                    stale = 0
                else:
                    stale += 1
                    if stale >= config.patience:
                        stop = True
            if config.max_steps is not None and step >= config.max_steps:
                stop = True
            if stop:
                break
        if stop:
            break

    if best_params:
        for p in model.parameters():
            np.copyto(p.data, best_params[p.name])
    return history


# ---------------------------------------------------------------------------
# lambda grid search


def simplex_grid(step: float = 0.1) -> list[LossWeights]:
    """All weight triples with components in {0, 0.1, ..., 1} summing to 1."""
    n = round(1.0 / step)
    grid = []
    for i in range(n + 1):
        for j in range(n + 1 - i):
            k = n - i - j
            grid.append(LossWeights(round(i * step, 10), round(j * step, 10),
                                    round(k * step, 10)))
    return grid


def lambda_grid_search(train_queries: list[QueryRecord],
                       val_queries: list[QueryRecord],
                       docs: list[HotelDocument],
                       model_factory, opt_config: OptimizerConfig,
                       grid: list[LossWeights] | None = None,
                       steps_per_candidate: int = 50,
                       val_pool_size: int = 200) -> tuple[LossWeights, list[dict]]:
    """Short training run per candidate; argmax validation MRR@10.

    Ties break toward larger retrieval weight, then larger MLM weight.
    """
    grid = grid if grid is not None else simplex_grid()
    results = []
    for weights in grid:
        model = model_factory()
        cfg = OptimizerConfig(lr_by_group=dict(opt_config.lr_by_group),
                              batch_size=opt_config.batch_size,
                              max_epochs=opt_config.max_epochs,
                              max_steps=steps_per_candidate,
                              momentum=opt_config.momentum,
                              clip_norm=opt_config.clip_norm,
                              optimizer=opt_config.optimizer,
                              validation_interval=max(steps_per_candidate, 1),
                              seed=opt_config.seed)
        fit(model, train_queries, val_queries, docs, cfg, weights,
            val_pool_size=val_pool_size)
        mrr = validation_mrr(model,
                             val_queries[:100],
                             build_validation_pool(val_queries[:100], docs,
                                                   val_pool_size, opt_config.seed))
        results.append({"weights": weights.as_tuple(), "val_mrr_at_10": mrr})
    best = max(results,
               key=lambda r: (r["val_mrr_at_10"], r["weights"][0], r["weights"][1]))
    w = best["weights"]
    return LossWeights(*w), results


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: RetrievalModel, path: str | Path) -> None:
    """Binary checkpoint: magic, version, tensor manifest, then f64 payloads."""
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            group = p.group.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<H", len(group)))
            fh.write(group)
            fh.write(struct.pack("<II", *p.tensor.shape))
        for p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(model: RetrievalModel, path: str | Path) -> None:
    """Restore parameters in place; manifest must match the model exactly."""
    params = model.parameters()
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ParseError(f"{path}: bad checkpoint magic {magic!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"{path}: unsupported checkpoint version {version}")
        if count != len(params):
            raise ParseError(f"{path}: checkpoint has {count} tensors, model has "
                             f"{len(params)}")
        manifest = []
        for _ in range(count):
            (n,) = struct.unpack("<H", fh.read(2))
            name = fh.read(n).decode("utf-8")
            (n,) = struct.unpack("<H", fh.read(2))
            group = fh.read(n).decode("utf-8")
            shape = struct.unpack("<II", fh.read(8))
            manifest.append((name, group, shape))
        for p, (name, group, shape) in zip(params, manifest):
            if p.name != name or p.group != group or p.tensor.shape != shape:
                raise ParseError(f"{path}: manifest entry {name} ({group}, {shape}) "
                                 f"does not match model parameter {p.name}")
        for p, (_, _, shape) in zip(params, manifest):
            nbytes = shape[0] * shape[1] * 8
            payload = fh.read(nbytes)
            if len(payload) != nbytes:
                raise ParseError(f"{path}: truncated payload for {p.name}")
            np.copyto(p.data, np.frombuffer(payload, dtype="<f8").reshape(shape))

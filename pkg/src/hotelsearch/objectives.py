"""The three training objectives and their weighted aggregation.

Retrieval: cross-entropy over softmax of cosine scores against negatives.
MLM: mean negative log-likelihood at the masked geography positions.
Visual facility learning: mean binary cross-entropy of a sigmoid head over
the flattened visual block rows against the 120-bit facility label vector,
so facility presence is predicted from visual evidence alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ContractError, InputError
from .transformer import init_matrix

N_FACILITIES = 120


class FacilityHead:
    """Linear map from the flattened visual block rows to facility logits.

    The weights are position-specific: each of the up-to-``max_rows`` block
    rows gets its own (dim x F) slab. A position-shared detector cannot work
    here, because attention mixing inside the vision encoder spreads each
    patch's content across positions, leaving the facility evidence aligned
    with row position rather than row content alone.
    """

    def __init__(self, dim: int, n_facilities: int = N_FACILITIES, seed: int = 0,
                 max_rows: int = 1):
        rng = np.random.default_rng(seed)
        self.n_facilities = n_facilities
        self.dim = dim
        self.max_rows = max_rows
        self.weight = Parameter("heads.facility_w",
                                init_matrix(rng, max_rows * dim, n_facilities),
                                "heads")
        self.bias = Parameter("heads.facility_b", np.zeros((1, n_facilities)), "heads")

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def logits(self, d: Tensor) -> Tensor:
        return ad.add_bias(ad.matmul(d, self.weight.tensor), self.bias.tensor)

    def gallery_logits(self, block: Tensor) -> Tensor:
        rows = block.shape[0]
        if rows < 1:
            raise ContractError("gallery_logits needs at least one visual row")
        if rows > self.max_rows or block.shape[1] != self.dim:
            raise ContractError(
                f"block {block.shape} exceeds head capacity "
                f"({self.max_rows} rows x {self.dim})")
        flat = ad.flatten_rows(block)
        weight = (self.weight.tensor if rows == self.max_rows
                  else ad.slice_rows(self.weight.tensor, 0, rows * self.dim))
        return ad.add_bias(ad.matmul(flat, weight), self.bias.tensor)


@dataclass
class LossWeights:
    retrieval: float = 0.7
    mlm: float = 0.2
    visf: float = 0.1

    def __post_init__(self):
        for v in (self.retrieval, self.mlm, self.visf):
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"loss weight {v} outside [0, 1]")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.retrieval, self.mlm, self.visf)


@dataclass
class BatchItem:
    """One aligned (query, positive document) training pair."""

    query_text: str
    doc_id: str
    text_ids: list[int]
    gallery: np.ndarray | list[np.ndarray] | None
    facility_labels: np.ndarray  # (F,) in {0, 1}
    geo_mask_positions: set[int]  # indices into text_ids (country/city)


def cosine(q: Tensor, d: Tensor) -> Tensor:
    """Cosine similarity of two vectors, as a scalar tensor."""
    if q.shape != d.shape or q.shape[0] != 1:
        raise ContractError(f"cosine expects two (1, d) vectors, got {q.shape}, {d.shape}")
    qn = ad.normalize_rows(q)
    dn = ad.normalize_rows(d)
    return ad.sum_all(ad.mul(qn, dn))


def retrieval_loss(q: Tensor, d_pos: Tensor, negatives: list[Tensor],
                   temperature: float = 1.0) -> Tensor:
    """-log softmax probability of the positive among {positive} + negatives.

    ``temperature`` divides the cosine scores before the softmax; the default
    of 1 applies no scaling. Cosines live in [-1, 1], so a temperature well
    below 1 is what makes the softmax discriminative in practice.
    """
    if not negatives:
        raise InputError("retrieval loss needs at least one negative")
    if temperature <= 0:
        raise InputError(f"temperature must be > 0, got {temperature}")
    scores = ad.concat_cols([cosine(q, d) for d in [d_pos] + list(negatives)])
    if temperature != 1.0:
        scores = ad.smul(scores, 1.0 / temperature)
    logp = ad.log_softmax(scores, axis=1)
    return ad.smul(ad.slice_cols(logp, 0, 1), -1.0)


def retrieval_loss_batch(queries: Tensor, docs: Tensor,
                         extra_negatives: Tensor | None = None,
                         temperature: float = 1.0) -> Tensor:
    """In-batch negatives: query i's positive is doc i, negatives are the rest.

    queries/docs are aligned (B, dim) stacks; extra_negatives an optional
    (E, dim) stack appended to every query's candidate pool.
    """
    if queries.shape != docs.shape:
        raise ContractError(f"queries {queries.shape} and docs {docs.shape} misaligned")
    if queries.shape[0] < 2 and extra_negatives is None:
        raise InputError("in-batch retrieval loss needs batch size >= 2 or extras")
    if temperature <= 0:
        raise InputError(f"temperature must be > 0, got {temperature}")
    qn = ad.normalize_rows(queries)
    pool = docs if extra_negatives is None else ad.concat_rows([docs, extra_negatives])
    dn = ad.normalize_rows(pool)
    scores = ad.matmul(qn, ad.transpose(dn))  # (B, B+E)
    if temperature != 1.0:
        scores = ad.smul(scores, 1.0 / temperature)
    logp = ad.log_softmax(scores, axis=1)
    b = queries.shape[0]
    diag = ad.take_diag(ad.slice_cols(logp, 0, b))
    return ad.smul(ad.mean_all(diag), -1.0)


def mlm_loss(logits: Tensor, targets: list[int], mask_positions: list[int]) -> Tensor:
    """Mean -log softmax(logits)[target] over the masked positions.

    ``logits`` covers the full sequence (len, |V|); ``targets`` are the true
    token ids at ``mask_positions``.
    """
    if not mask_positions:
        raise ContractError("mlm_loss with an empty mask set; caller must skip "
                            "documents without geography tokens")
    if len(targets) != len(mask_positions):
        raise InputError("targets and mask_positions misaligned")
    rows = ad.gather_rows(logits, mask_positions)
    logp = ad.log_softmax(rows, axis=1)
    picked = ad.gather_cols_one_per_row(logp, targets)
    return ad.smul(ad.mean_all(picked), -1.0)


def visf_loss(d: Tensor, head: FacilityHead, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over the facility bits for one feature row.

    Computed from logits (softplus form) for stability; equivalent to BCE on
    sigmoid probabilities clamped away from 0 and 1.
    """
    labels = np.asarray(labels, dtype=np.float64).reshape(1, -1)
    if labels.shape[1] != head.n_facilities:
        raise InputError(f"expected {head.n_facilities} labels, got {labels.shape[1]}")
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise InputError("facility labels must be in {0, 1}")
    z = head.logits(d)
    # BCE(z, f) = softplus(z) - f * z
    per_bit = ad.sub(ad.softplus(z), ad.mul(Tensor(labels), z))
    return ad.mean_all(per_bit)


def visf_loss_gallery(blocks: list[Tensor], head: FacilityHead,
                      labels: np.ndarray) -> Tensor:
    """Mean BCE of per-document visual-block facility logits over a batch.

    ``blocks`` holds one (rows_i, dim) visual block per document; documents
    embedded without a gallery must be filtered out by the caller.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (len(blocks), head.n_facilities):
        raise InputError(f"labels shape {labels.shape} != "
                         f"({len(blocks)}, {head.n_facilities})")
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise InputError("facility labels must be in {0, 1}")
    if not blocks:
        raise ContractError("visf_loss_gallery with no visual blocks")
    z = ad.concat_rows([head.gallery_logits(b) for b in blocks])
    per_bit = ad.sub(ad.softplus(z), ad.mul(Tensor(labels), z))
    return ad.mean_all(per_bit)


def visf_loss_batch(docs: Tensor, head: FacilityHead, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (docs.shape[0], head.n_facilities):
        raise InputError(f"labels shape {labels.shape} != "
                         f"({docs.shape[0]}, {head.n_facilities})")
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise InputError("facility labels must be in {0, 1}")
    z = head.logits(docs)
    per_bit = ad.sub(ad.softplus(z), ad.mul(Tensor(labels), z))
    return ad.mean_all(per_bit)


def final_loss(l_ret: Tensor, l_mlm: Tensor, l_visf: Tensor, w: LossWeights) -> Tensor:
    l1, l2, l3 = w.as_tuple()
    if l2 == 0.0 and l3 == 0.0 and l1 == 1.0:
        return l_ret  # exact ablation identity
    total = ad.smul(l_ret, l1)
    if l2 != 0.0:
        total = ad.add(total, ad.smul(l_mlm, l2))
    if l3 != 0.0:
        total = ad.add(total, ad.smul(l_visf, l3))
    return total

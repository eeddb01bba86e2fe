"""Post-LN transformer encoder block shared by the vision and text towers."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError


def init_matrix(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(rows), size=(rows, cols))


class EncoderLayer:
    """Multi-head self-attention + feed-forward, residuals, post-layer-norm."""

    def __init__(self, name: str, dim: int, heads: int, group: str,
                 rng: np.random.Generator, ff_factor: int = 2):
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        hidden = ff_factor * dim

        def mat(suffix, r, c):
            return Parameter(f"{name}.{suffix}", init_matrix(rng, r, c), group)

        def vec(suffix, c, value=0.0):
            return Parameter(f"{name}.{suffix}", np.full((1, c), value), group)

        self.wq, self.bq = mat("wq", dim, dim), vec("bq", dim)
        self.wk, self.bk = mat("wk", dim, dim), vec("bk", dim)
        self.wv, self.bv = mat("wv", dim, dim), vec("bv", dim)
        self.wo, self.bo = mat("wo", dim, dim), vec("bo", dim)
        self.ln1_g, self.ln1_b = vec("ln1_g", dim, 1.0), vec("ln1_b", dim)
        self.w1, self.b1 = mat("w1", dim, hidden), vec("b1", hidden)
        self.w2, self.b2 = mat("w2", hidden, dim), vec("b2", dim)
        self.ln2_g, self.ln2_b = vec("ln2_g", dim, 1.0), vec("ln2_b", dim)

    def parameters(self) -> list[Parameter]:
        return [
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv,
            self.wo, self.bo, self.ln1_g, self.ln1_b,
            self.w1, self.b1, self.w2, self.b2, self.ln2_g, self.ln2_b,
        ]

    def __call__(self, h: Tensor) -> Tensor:
        q = ad.add_bias(ad.matmul(h, self.wq.tensor), self.bq.tensor)
        k = ad.add_bias(ad.matmul(h, self.wk.tensor), self.bk.tensor)
        v = ad.add_bias(ad.matmul(h, self.wv.tensor), self.bv.tensor)
        scale = 1.0 / math.sqrt(self.head_dim)
        head_outs = []
        for i in range(self.heads):
            lo, hi = i * self.head_dim, (i + 1) * self.head_dim
            qh = ad.slice_cols(q, lo, hi)
            kh = ad.slice_cols(k, lo, hi)
            vh = ad.slice_cols(v, lo, hi)
            scores = ad.smul(ad.matmul(qh, ad.transpose(kh)), scale)
            attn = ad.softmax(scores, axis=1)
            head_outs.append(ad.matmul(attn, vh))
        mixed = head_outs[0] if self.heads == 1 else ad.concat_cols(head_outs)
        attn_out = ad.add_bias(ad.matmul(mixed, self.wo.tensor), self.bo.tensor)
        h = ad.layer_norm(ad.add(h, attn_out), self.ln1_g.tensor, self.ln1_b.tensor)
        ff = ad.add_bias(ad.matmul(h, self.w1.tensor), self.b1.tensor)
        ff = ad.gelu(ff)
        ff = ad.add_bias(ad.matmul(ff, self.w2.tensor), self.b2.tensor)
        return ad.layer_norm(ad.add(h, ff), self.ln2_g.tensor, self.ln2_b.tensor)

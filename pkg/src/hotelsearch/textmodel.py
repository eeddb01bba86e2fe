"""Text towers: vocabulary, tokenization, the SLM/LLM transformer family,
pooling, and the masked-token prediction head.

Both towers instantiate the same code path with different TowerConfig; only
the parameter group tag (and hence the learning rate) differs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import (ConfigError, ContractError, InputError, LengthError,
                     ShapeError)
from .transformer import EncoderLayer, init_matrix

PAD, UNK, MASK, CLS, IMAGE_START, IMAGE_END = (
    "<pad>", "<unk>", "<mask>", "<cls>", "<image_start>", "<image_end>")
SPECIALS = [PAD, UNK, MASK, CLS, IMAGE_START, IMAGE_END]

_WORD_RE = re.compile(r"[a-z0-9_]+|<[a-z_]+>")


class Vocabulary:
    """Bijective token <-> id mapping; specials occupy the first ids."""

    def __init__(self, tokens: list[str]):
        all_tokens = list(SPECIALS)
        seen = set(all_tokens)
        for t in tokens:
            if t not in seen:
                seen.add(t)
                all_tokens.append(t)
        self.tokens = all_tokens
        self.ids = {t: i for i, t in enumerate(all_tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.ids.get(token, self.ids[UNK])

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        vocab = cls.__new__(cls)
        vocab.tokens = lines
        vocab.ids = {t: i for i, t in enumerate(lines)}
        for s in SPECIALS:
            if s not in vocab.ids:
                raise InputError(f"vocabulary file missing special token {s}")
        return vocab


@dataclass
class TokenSequence:
    ids: list[int]
    mask_positions: set[int] = field(default_factory=set)

    def __len__(self) -> int:
        return len(self.ids)


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    """Lowercased word-level split; OOV words map to <unk>."""
    words = _WORD_RE.findall(text.lower())
    return TokenSequence([vocab.id_of(w) for w in words])


def detokenize(seq: TokenSequence, vocab: Vocabulary) -> str:
    return " ".join(vocab.token_of(i) for i in seq.ids)


@dataclass
class TowerConfig:
    dim: int = 32
    layers: int = 2
    heads: int = 2
    max_len: int = 64
    pooling: str = "mean"  # "mean" or "CLS"
    use_positions: bool = True

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.pooling not in ("mean", "CLS"):
            raise ConfigError(f"unknown pooling strategy {self.pooling!r}")


class TextTower:
    """Transformer encoder over token ids or pre-built embedding sequences."""

    def __init__(self, config: TowerConfig, vocab_size: int, group: str, seed: int = 0):
        self.config = config
        self.group = group
        rng = np.random.default_rng(seed)
        d = config.dim
        self.token_emb = Parameter(f"{group}.token_emb",
                                   rng.normal(0, 1.0 / np.sqrt(d), size=(vocab_size, d)),
                                   group)
        self.positions = Parameter(f"{group}.pos",
                                   rng.normal(0, 0.02, size=(config.max_len, d)),
                                   group)
        self.layers = [
            EncoderLayer(f"{group}.layer{i}", d, config.heads, group, rng)
            for i in range(config.layers)
        ]

    def parameters(self) -> list[Parameter]:
        params = [self.token_emb, self.positions]
        for layer in self.layers:
            params.extend(layer.parameters())
        return params

    def embed_ids(self, ids: list[int]) -> Tensor:
        return ad.embedding(self.token_emb.tensor, ids)

    def encode(self, inputs: TokenSequence | Tensor) -> Tensor:
        """Run the tower; returns hidden states (len, dim).

        A TokenSequence is embedded first; a Tensor of embedding vectors is
        consumed directly (the injection path for visual tokens).
        """
        if isinstance(inputs, TokenSequence):
            if len(inputs) == 0:
                raise InputError("cannot encode an empty token sequence")
            x = self.embed_ids(inputs.ids)
        else:
            if inputs.shape[1] != self.config.dim:
                raise ShapeError(
                    f"injected vectors have width {inputs.shape[1]}, tower dim "
                    f"{self.config.dim}")
            x = inputs
        n = x.shape[0]
        if n > self.config.max_len:
            raise LengthError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        if self.config.use_positions:
            x = ad.add(x, ad.slice_rows(self.positions.tensor, 0, n))
        for layer in self.layers:
            x = layer(x)
        return x


def pool(hidden: Tensor, strategy: str, n_valid: int | None = None) -> Tensor:
    """Reduce hidden states to one vector: CLS row or mean over non-pad rows."""
    if hidden.shape[0] == 0:
        raise ContractError("pool of empty hidden states")
    if strategy == "CLS":
        return ad.slice_rows(hidden, 0, 1)
    if strategy == "mean":
        if n_valid is not None:
            if not (1 <= n_valid <= hidden.shape[0]):
                raise ContractError(f"n_valid {n_valid} out of range for {hidden.shape}")
            hidden = ad.slice_rows(hidden, 0, n_valid)
        return ad.mean_axis0(hidden)
    raise ConfigError(f"unknown pooling strategy {strategy!r}")


class MLMHead:
    """Affine map from LLM hidden states to vocabulary logits."""

    def __init__(self, dim: int, vocab_size: int, seed: int = 0,
                 tied_embedding: Parameter | None = None):
        rng = np.random.default_rng(seed)
        self.tied = tied_embedding is not None
        if tied_embedding is not None:
            if tied_embedding.tensor.shape != (vocab_size, dim):
                raise ConfigError("tied embedding shape mismatch")
            self.weight = tied_embedding
        else:
            self.weight = Parameter("heads.mlm_w", init_matrix(rng, dim, vocab_size), "heads")
        self.bias = Parameter("heads.mlm_b", np.zeros((1, vocab_size)), "heads")

    def parameters(self) -> list[Parameter]:
        return ([self.bias] if self.tied else [self.weight, self.bias])

    def logits(self, hidden: Tensor) -> Tensor:
        w = self.weight.tensor
        if self.tied:
            w = ad.transpose(w)
        if hidden.shape[1] != w.shape[0]:
            raise ShapeError(
                f"hidden width {hidden.shape[1]} != head input {w.shape[0]}")
        return ad.add_bias(ad.matmul(hidden, w), self.bias.tensor)


def mlm_logits(hidden: Tensor, head: MLMHead) -> Tensor:
    return head.logits(hidden)

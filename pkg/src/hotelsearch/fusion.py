"""Document and query embedding assembly.

Builds the fixed-size visual block from a gallery (mean over corresponding
patches of all images), projects it into the text tower's space, assembles
the document input sequence, and produces the final document and query
embeddings. Also hosts the one-token-per-image (1TPI) ablation paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ContractError, InputError, LengthError, ShapeError
from .textmodel import (CLS, IMAGE_END, IMAGE_START, MASK, TokenSequence,
                        TowerConfig, MLMHead, TextTower, Vocabulary, pool,
                        tokenize)
from .transformer import init_matrix
from .vision import Image, PatchEmbeddings, VisionEncoder

MODES = ("pooled", "1tpi-cls", "1tpi-patch", "none")


@dataclass
class Gallery:
    images: list[PatchEmbeddings]

    def __post_init__(self):
        if self.images:
            k = self.images[0].k
            dv = self.images[0].dim_vision
            for pe in self.images:
                if pe.k != k or pe.dim_vision != dv:
                    raise ShapeError("gallery members disagree on k or dim_vision")

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class VisualBlock:
    vectors: Tensor | None  # (rows, dim_LLM), None for the zero-image policy
    mode: str
    count_used: int

    @property
    def rows(self) -> int:
        return 0 if self.vectors is None else self.vectors.shape[0]


class VisualProjection:
    """Row-wise affine map from vision width into the LLM token space."""

    def __init__(self, dim_vision: int, dim_llm: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.weight = Parameter("projection.visual_w",
                                init_matrix(rng, dim_vision, dim_llm), "projection")
        self.bias = Parameter("projection.visual_b", np.zeros((1, dim_llm)), "projection")

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.weight.tensor.shape[0]:
            raise ShapeError(
                f"projection input width {x.shape[1]} != {self.weight.tensor.shape[0]}")
        out = ad.add_bias(ad.matmul(x, self.weight.tensor), self.bias.tensor)
        # unit-normalize each projected row so visual inputs arrive at the
        # same scale as token embeddings; un-normalized vision-encoder
        # outputs are an order of magnitude larger and would dominate both
        # attention and pooling in the document tower
        return ad.normalize_rows(out)


class QueryAlignment:
    """Projects the small tower's pooled output to the document width."""

    def __init__(self, dim_slm: int, dim_llm: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.weight = Parameter("projection.align_w",
                                init_matrix(rng, dim_slm, dim_llm), "projection")
        self.bias = Parameter("projection.align_b", np.zeros((1, dim_llm)), "projection")

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.weight.tensor.shape[0]:
            raise ShapeError(
                f"alignment input width {x.shape[1]} != {self.weight.tensor.shape[0]}")
        return ad.add_bias(ad.matmul(x, self.weight.tensor), self.bias.tensor)


def pool_gallery(gallery: Gallery) -> Tensor:
    """Mean over images of each patch position: row i = mean_j patches_j[i].

    Output shape (k, dim_vision) is independent of gallery size. Uses
    pairwise accumulation to bound floating-point drift for large galleries.
    """
    if len(gallery) == 0:
        raise ContractError("pool_gallery on an empty gallery; caller applies the "
                            "zero-image policy")
    total = ad.tree_sum([pe.patches for pe in gallery.images])
    return ad.smul(total, 1.0 / len(gallery))


def project_visual(pooled: Tensor, proj: VisualProjection) -> Tensor:
    return proj(pooled)


def onetpi_cls(gallery: Gallery, proj: VisualProjection, limit: int = 50) -> VisualBlock:
    """One projected CLS vector per image, first `limit` images in order."""
    if limit < 1:
        raise InputError(f"1TPI limit must be >= 1, got {limit}")
    used = gallery.images[:limit]
    if not used:
        return VisualBlock(None, "1tpi-cls", 0)
    block = ad.concat_rows([pe.cls for pe in used])
    return VisualBlock(proj(block), "1tpi-cls", len(used))


def onetpi_patch(gallery: Gallery, proj: VisualProjection, limit: int = 50) -> VisualBlock:
    """One projected mean-of-patches vector per image, capped at `limit`."""
    if limit < 1:
        raise InputError(f"1TPI limit must be >= 1, got {limit}")
    used = gallery.images[:limit]
    if not used:
        return VisualBlock(None, "1tpi-patch", 0)
    block = ad.concat_rows([ad.mean_axis0(pe.patches) for pe in used])
    return VisualBlock(proj(block), "1tpi-patch", len(used))


def pooled_block(gallery: Gallery, proj: VisualProjection) -> VisualBlock:
    if len(gallery) == 0:
        return VisualBlock(None, "pooled", 0)
    return VisualBlock(proj(pool_gallery(gallery)), "pooled", len(gallery))


@dataclass
class ModelConfig:
    image_side: int = 28
    image_window: int = 4
    dim_vision: int = 32
    vision_layers: int = 2
    vision_heads: int = 2
    slm: TowerConfig = field(default_factory=lambda: TowerConfig(
        dim=32, layers=2, heads=2, max_len=64, pooling="mean"))
    llm: TowerConfig = field(default_factory=lambda: TowerConfig(
        dim=64, layers=4, heads=4, max_len=128, pooling="mean"))
    visual_mode: str = "pooled"  # pooled | 1tpi-cls | 1tpi-patch | none
    onetpi_limit: int = 50
    n_facilities: int = 120
    tie_mlm_head: bool = False
    freeze_vision: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.visual_mode not in MODES:
            raise ConfigError(f"unknown visual mode {self.visual_mode!r}")


class RetrievalModel:
    """Asymmetric bi-encoder: small query tower, large fused document tower."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary):
        from .objectives import FacilityHead  # heads live with the losses

        self.config = config
        self.vocab = vocab
        base = config.seed
        self.vision = VisionEncoder(
            side=config.image_side, window=config.image_window,
            dim=config.dim_vision, layers=config.vision_layers,
            heads=config.vision_heads, seed=base)
        self.slm = TextTower(config.slm, len(vocab), "SLM", seed=base + 1)
        self.llm = TextTower(config.llm, len(vocab), "LLM", seed=base + 2)
        self.visual_proj = VisualProjection(config.dim_vision, config.llm.dim, seed=base + 3)
        self.query_align = QueryAlignment(config.slm.dim, config.llm.dim, seed=base + 4)
        self.mlm_head = MLMHead(config.llm.dim, len(vocab), seed=base + 5,
                                tied_embedding=self.llm.token_emb if config.tie_mlm_head else None)
        self.facility_head = FacilityHead(
            config.llm.dim, config.n_facilities, seed=base + 6,
            max_rows=max(self.vision.k, config.onetpi_limit))

    def parameters(self) -> list[Parameter]:
        params = (self.vision.parameters() + self.slm.parameters()
                  + self.llm.parameters() + self.visual_proj.parameters()
                  + self.query_align.parameters() + self.mlm_head.parameters()
                  + self.facility_head.parameters())
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ContractError("duplicate parameter names")
        return params

    # -- gallery handling ---------------------------------------------------

    def encode_gallery(self, pixels: np.ndarray | list[np.ndarray]) -> Gallery:
        """Encode raw gallery pixels, (N, H, W, 3) or a list of (H, W, 3)."""
        images = list(pixels)
        embs = []
        for px in images:
            img = Image(np.asarray(px, dtype=np.float64))
            if img.height == self.vision.side and img.width == self.vision.side:
                from .vision import patchify
                embs.append(self.vision.encode(patchify(img, self.vision.window)))
            else:
                embs.append(self.vision.encode_image(img))
        return Gallery(embs)

    def visual_block(self, gallery: Gallery, mode: str | None = None) -> VisualBlock:
        mode = mode or self.config.visual_mode
        if mode == "none" or len(gallery) == 0:
            return VisualBlock(None, mode, 0)
        if mode == "pooled":
            return pooled_block(gallery, self.visual_proj)
        if mode == "1tpi-cls":
            return onetpi_cls(gallery, self.visual_proj, self.config.onetpi_limit)
        if mode == "1tpi-patch":
            return onetpi_patch(gallery, self.visual_proj, self.config.onetpi_limit)
        raise ConfigError(f"unknown visual mode {mode!r}")

    def visual_features(self, gallery: Gallery, mode: str | None = None) -> np.ndarray | None:
        """Pre-projection feature rows of the visual block, as a plain array.

        With the vision encoder frozen these are constant per document, so
        callers may compute them once and feed them back through
        ``embed_document(..., visual_features=...)`` on every later pass.
        """
        mode = mode or self.config.visual_mode
        if mode == "none" or len(gallery) == 0:
            return None
        if mode == "pooled":
            return pool_gallery(gallery).data.copy()
        used = gallery.images[:self.config.onetpi_limit]
        if mode == "1tpi-cls":
            return np.concatenate([pe.cls.data for pe in used], axis=0)
        if mode == "1tpi-patch":
            return np.concatenate(
                [pe.patches.data.mean(axis=0, keepdims=True) for pe in used], axis=0)
        raise ConfigError(f"unknown visual mode {mode!r}")

    def block_from_features(self, features: np.ndarray | None,
                            mode: str | None = None) -> VisualBlock:
        mode = mode or self.config.visual_mode
        if mode == "none" or features is None or len(features) == 0:
            return VisualBlock(None, mode, 0)
        return VisualBlock(self.visual_proj(Tensor(features)), mode, len(features))

    # -- input assembly -----------------------------------------------------

    def truncate_text(self, text_ids: list[int], visual_rows: int) -> list[int]:
        """Fit text into the LLM budget, dropping description tail tokens only.

        The first two text tokens (country, city) are never dropped; neither
        is the visual block.
        """
        extra = 1 if self.config.llm.pooling == "CLS" else 0
        budget = self.config.llm.max_len - visual_rows - 2 - extra
        if budget < min(len(text_ids), 2):
            raise LengthError(
                f"no room for text: visual block {visual_rows} + separators 2 "
                f"leave budget {budget} of max_len {self.config.llm.max_len}")
        return text_ids[:budget]

    def assemble_input(self, visual: VisualBlock, text: TokenSequence) -> tuple[Tensor, int]:
        """Build X = e(<image_start>); visual rows; e(<image_end>); text embeddings.

        Returns (X, text_offset) where text_offset is the row index of the
        first text token, so mask positions can be located in the output.
        """
        emb = self.llm.token_emb.tensor
        start = ad.embedding(emb, [self.vocab.id_of(IMAGE_START)])
        end = ad.embedding(emb, [self.vocab.id_of(IMAGE_END)])
        parts = [start]
        if visual.vectors is not None:
            parts.append(visual.vectors)
        parts.append(end)
        if text.ids:
            parts.append(self.llm.embed_ids(text.ids))
        prefix = 0
        if self.config.llm.pooling == "CLS":
            parts.insert(0, ad.embedding(emb, [self.vocab.id_of(CLS)]))
            prefix = 1
        x = ad.concat_rows(parts)
        if x.shape[0] > self.config.llm.max_len:
            raise LengthError(
                f"assembled length {x.shape[0]} exceeds max_len "
                f"{self.config.llm.max_len} (visual {visual.rows} + 2 separators "
                f"+ {len(text.ids)} text)")
        return x, prefix + 1 + visual.rows + 1

    # -- embeddings ----------------------------------------------------------

    def embed_document(self, text_ids: list[int],
                       gallery_pixels: np.ndarray | list[np.ndarray] | None,
                       mode: str | None = None,
                       mask_positions: set[int] | None = None,
                       visual_features: np.ndarray | None = None) -> dict:
        """Embed one document. Returns d plus hidden states and layout info.

        ``mask_positions`` are indices into the text token list whose
        embeddings are replaced by <mask> (the MLM forward).
        ``visual_features`` are precomputed pre-projection block rows (see
        ``visual_features()``); when given, the raw gallery is not encoded.
        """
        if visual_features is not None:
            block = self.block_from_features(visual_features, mode)
        else:
            gallery = (self.encode_gallery(gallery_pixels)
                       if gallery_pixels is not None and len(gallery_pixels) > 0
                       else Gallery([]))
            block = self.visual_block(gallery, mode)
        ids = self.truncate_text(list(text_ids), block.rows)
        if mask_positions:
            mask_id = self.vocab.id_of(MASK)
            ids = [mask_id if i in mask_positions else t for i, t in enumerate(ids)]
        x, text_offset = self.assemble_input(block, TokenSequence(ids))
        hidden = self.llm.encode(x)
        # mean pooling averages two unit-normalized segment means instead of
        # a flat mean over all rows: the visual prefix has a fixed 49 rows
        # against ~12 text rows, so a flat mean lets the prefix's large
        # common component swamp the text signal and collapse document
        # embeddings onto one direction. The text mean is taken after the
        # tower; the visual mean is taken over the projected gallery rows
        # before the tower (a skip connection), because row mixing inside
        # the tower rapidly attenuates the per-patch identity that carries
        # facility evidence, while the projected rows keep it linearly
        # decodable. Normalizing each segment mean gives both modalities
        # equal weight regardless of tower depth (CLS reads row 0 as usual).
        if self.config.llm.pooling == "mean" and text_offset > 0:
            text_mean = ad.normalize_rows(
                pool(ad.slice_rows(hidden, text_offset, hidden.shape[0]), "mean"))
            if block.rows > 0:
                vis_mean = ad.normalize_rows(ad.mean_axis0(block.vectors))
                d = ad.smul(ad.add(text_mean, vis_mean), 0.5)
            else:
                d = text_mean
        else:
            d = pool(hidden, self.config.llm.pooling)
        return {
            "d": d,
            "hidden": hidden,
            "text_offset": text_offset,
            "text_ids": ids,
            "visual_rows": block.rows,
            "visual_block": block.vectors if block.rows > 0 else None,
        }

    def embed_query(self, text: str) -> Tensor:
        seq = tokenize(text, self.vocab)
        if len(seq) == 0:
            raise InputError(f"empty query text: {text!r}")
        if self.config.slm.pooling == "CLS":
            seq = TokenSequence([self.vocab.id_of(CLS)] + seq.ids)
        hidden = self.slm.encode(seq)
        return self.query_align(pool(hidden, self.config.slm.pooling))

"""Declarative run configuration: one flat key-value file drives every command.

Every key has a default matching the desk-scale setup; unknown keys are
rejected. The effective configuration is echoed into each output directory
so any artifact can be reproduced from its directory alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import yaml

from .corpus import CorpusConfig
from .errors import ConfigError
from .fusion import ModelConfig
from .objectives import LossWeights
from .textmodel import TowerConfig
from .trainer import OptimizerConfig


@dataclass
class RunConfig:
    seed: int = 0

    # corpus
    n_docs: int = 2000
    queries_train: int = 500
    queries_val: int = 100
    queries_test: int = 100
    image_side: int = 28
    image_window: int = 4
    n_facilities: int = 120
    n_countries: int = 12
    cities_per_country: int = 4
    facilities_min: int = 4
    facilities_max: int = 12
    advertise_prob: float = 0.35
    desc_body_len: int = 10
    landmarks_per_city: int = 3
    filler_vocab: int = 150
    gallery_mean: float = 8.0
    gallery_max: int = 306

    # model
    dim_vision: int = 32
    vision_layers: int = 2
    vision_heads: int = 2
    slm_dim: int = 32
    slm_layers: int = 2
    slm_heads: int = 2
    slm_max_len: int = 64
    slm_pooling: str = "mean"
    llm_dim: int = 64
    llm_layers: int = 4
    llm_heads: int = 4
    llm_max_len: int = 128
    llm_pooling: str = "mean"
    visual_mode: str = "pooled"
    onetpi_limit: int = 50
    tie_mlm_head: bool = False
    # the randomly initialized vision encoder already yields linearly
    # separable patch features for the facility evidence; freezing it lets
    # the per-document visual features be cached across training steps
    freeze_vision: bool = True

    # training (desk-scaled analogs of the 5e-4 / 5e-6 reference rates,
    # preserving the higher-rate-for-the-small-tower relationship)
    lr_slm: float = 3e-3
    lr_llm: float = 1e-3
    lr_projection: float | None = None  # None -> LLM rate
    # the facility head is a fresh linear probe over the visual block; it
    # needs a rate well above the tower rates to converge within the step
    # budget
    lr_heads: float | None = 1e-2
    lr_vision: float | None = None
    batch_size: int = 8
    max_epochs: int = 10
    max_steps: int | None = 600
    momentum: float = 0.9
    clip_norm: float = 5.0
    optimizer: str = "adam"
    patience: int = 5
    validation_interval: int = 50
    val_pool_size: int = 300
    val_query_limit: int = 100
    lambda_ret: float = 0.7
    lambda_mlm: float = 0.2
    lambda_visf: float = 0.1
    # softmax sharpening for the contrastive term during training; the loss
    # function itself defaults to 1 (no scaling)
    retrieval_temperature: float = 0.05
    # extra near-miss negatives (same city or a shared facility) per batch item
    hard_negatives: int = 1

    # retrieval / evaluation
    ivf_clusters: int = 32
    ivf_nprobe: int = 8
    ivf_iterations: int = 25
    rerank_depth: int = 100
    top_k: int = 100

    # latency bench
    bench_warmup: int = 10
    bench_reps: int = 200

    # ------------------------------------------------------------------

    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(
            n_docs=self.n_docs, queries_train=self.queries_train,
            queries_val=self.queries_val, queries_test=self.queries_test,
            image_side=self.image_side, image_window=self.image_window,
            n_facilities=self.n_facilities, n_countries=self.n_countries,
            cities_per_country=self.cities_per_country,
            facilities_min=self.facilities_min, facilities_max=self.facilities_max,
            advertise_prob=self.advertise_prob, desc_body_len=self.desc_body_len,
            landmarks_per_city=self.landmarks_per_city,
            filler_vocab=self.filler_vocab, gallery_mean=self.gallery_mean,
            gallery_max=self.gallery_max, seed=self.seed)

    def model_config(self, visual_mode: str | None = None,
                     freeze_vision: bool | None = None) -> ModelConfig:
        return ModelConfig(
            image_side=self.image_side, image_window=self.image_window,
            dim_vision=self.dim_vision, vision_layers=self.vision_layers,
            vision_heads=self.vision_heads,
            slm=TowerConfig(dim=self.slm_dim, layers=self.slm_layers,
                            heads=self.slm_heads, max_len=self.slm_max_len,
                            pooling=self.slm_pooling),
            llm=TowerConfig(dim=self.llm_dim, layers=self.llm_layers,
                            heads=self.llm_heads, max_len=self.llm_max_len,
                            pooling=self.llm_pooling),
            visual_mode=visual_mode if visual_mode is not None else self.visual_mode,
            onetpi_limit=self.onetpi_limit, n_facilities=self.n_facilities,
            tie_mlm_head=self.tie_mlm_head,
            freeze_vision=(freeze_vision if freeze_vision is not None
                           else self.freeze_vision),
            seed=self.seed)

    def optimizer_config(self, shared_lr: float | None = None) -> OptimizerConfig:
        if shared_lr is not None:
            rates = {g: shared_lr for g in
                     ("SLM", "LLM", "projection", "heads", "vision")}
        else:
            rates = {"SLM": self.lr_slm, "LLM": self.lr_llm}
            for group, lr in (("projection", self.lr_projection),
                              ("heads", self.lr_heads),
                              ("vision", self.lr_vision)):
                if lr is not None:
                    rates[group] = lr
        return OptimizerConfig(
            lr_by_group=rates, batch_size=self.batch_size,
            max_epochs=self.max_epochs, max_steps=self.max_steps,
            momentum=self.momentum, clip_norm=self.clip_norm,
            optimizer=self.optimizer, patience=self.patience,
            validation_interval=self.validation_interval, seed=self.seed)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_ret, self.lambda_mlm, self.lambda_visf)

    # ------------------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False),
            encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: configuration must be a flat mapping")
        return cls.from_dict(raw, source=str(path))

    @classmethod
    def from_dict(cls, raw: dict, source: str = "<dict>") -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"{source}: unknown configuration keys {unknown}")
        return cls(**raw)

    def with_overrides(self, **overrides) -> "RunConfig":
        clean = {k: v for k, v in overrides.items() if v is not None}
        known = {f.name for f in dataclasses.fields(self)}
        unknown = sorted(set(clean) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys {unknown}")
        return dataclasses.replace(self, **clean)

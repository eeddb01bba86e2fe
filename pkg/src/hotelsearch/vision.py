"""Toy CLIP stand-in: preprocessing, patch extraction, and a small ViT encoder.

Images are (H, W, 3) float64 arrays with values in [0, 1]; the corpus module
emits pixel tensors directly, so there is no file decoding here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import InputError, ShapeError
from .transformer import EncoderLayer, init_matrix


@dataclass
class Image:
    pixels: np.ndarray  # (H, W, 3), values in [0, 1]

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise InputError(f"image must be (H, W, 3), got {self.pixels.shape}")
        if self.pixels.shape[0] == 0 or self.pixels.shape[1] == 0:
            raise InputError("degenerate 0-pixel image")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class PatchEmbeddings:
    """Grid features plus the CLS output for one image."""

    patches: Tensor  # (k, dim_vision)
    cls: Tensor      # (1, dim_vision)

    @property
    def k(self) -> int:
        return self.patches.shape[0]

    @property
    def dim_vision(self) -> int:
        return self.patches.shape[1]


def _bilinear_resize(pixels: np.ndarray, side: int) -> np.ndarray:
    h, w, _ = pixels.shape
    if h == side and w == side:
        return pixels.copy()
    ys = (np.arange(side) + 0.5) * (h / side) - 0.5
    xs = (np.arange(side) + 0.5) * (w / side) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).reshape(-1, 1, 1)
    wx = (xs - x0).reshape(1, -1, 1)
    top = pixels[y0][:, x0] * (1 - wx) + pixels[y0][:, x1] * wx
    bot = pixels[y1][:, x0] * (1 - wx) + pixels[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def preprocess(image: Image, side: int) -> Image:
    """Center-crop to a square, then bilinear-resample to side x side."""
    h, w = image.height, image.width
    s = min(h, w)
    top = (h - s) // 2
    left = (w - s) // 2
    cropped = image.pixels[top:top + s, left:left + s]
    resized = _bilinear_resize(cropped, side)
    return Image(np.clip(resized, 0.0, 1.0))


def patchify(image: Image, window: int) -> np.ndarray:
    """Split a square image into non-overlapping windows, raster order.

    Returns a (k, window*window*3) matrix of flattened patches.
    """
    side = image.height
    if image.width != side:
        raise ShapeError(f"patchify needs a square image, got {image.pixels.shape[:2]}")
    if side % window != 0:
        raise ShapeError(f"side {side} not divisible by window {window}")
    g = side // window
    px = image.pixels.reshape(g, window, g, window, 3)
    patches = px.transpose(0, 2, 1, 3, 4).reshape(g * g, window * window * 3)
    return np.ascontiguousarray(patches)


def patch_count(side: int, window: int) -> int:
    if side % window != 0:
        raise ShapeError(f"side {side} not divisible by window {window}")
    return (side // window) ** 2


class VisionEncoder:
    """Linear patch embedding + learned positions + a small transformer."""

    def __init__(self, side: int = 28, window: int = 4, dim: int = 32,
                 layers: int = 2, heads: int = 2, seed: int = 0):
        self.side = side
        self.window = window
        self.dim = dim
        self.k = patch_count(side, window)
        patch_len = window * window * 3
        rng = np.random.default_rng(seed)
        self.patch_proj = Parameter("vision.patch_proj", init_matrix(rng, patch_len, dim), "vision")
        self.patch_bias = Parameter("vision.patch_bias", np.zeros((1, dim)), "vision")
        self.cls_token = Parameter("vision.cls", rng.normal(0, 0.02, size=(1, dim)), "vision")
        self.positions = Parameter("vision.pos", rng.normal(0, 0.02, size=(self.k + 1, dim)), "vision")
        self.layers = [
            EncoderLayer(f"vision.layer{i}", dim, heads, "vision", rng)
            for i in range(layers)
        ]

    def parameters(self) -> list[Parameter]:
        params = [self.patch_proj, self.patch_bias, self.cls_token, self.positions]
        for layer in self.layers:
            params.extend(layer.parameters())
        return params

    def encode(self, patches: np.ndarray) -> PatchEmbeddings:
        if patches.ndim != 2 or patches.shape[0] == 0:
            raise ShapeError("encode expects a nonempty (k, patch_len) matrix")
        if patches.shape[1] != self.patch_proj.tensor.shape[0]:
            raise ShapeError(
                f"patch length {patches.shape[1]} != configured "
                f"{self.patch_proj.tensor.shape[0]}")
        if patches.shape[0] != self.k:
            raise ShapeError(f"expected {self.k} patches, got {patches.shape[0]}")
        x = ad.add_bias(ad.matmul(Tensor(patches), self.patch_proj.tensor),
                        self.patch_bias.tensor)
        seq = ad.concat_rows([self.cls_token.tensor, x])
        seq = ad.add(seq, self.positions.tensor)
        for layer in self.layers:
            seq = layer(seq)
        return PatchEmbeddings(
            patches=ad.slice_rows(seq, 1, self.k + 1),
            cls=ad.slice_rows(seq, 0, 1),
        )

    def encode_image(self, image: Image) -> PatchEmbeddings:
        prepared = preprocess(image, self.side)
        return self.encode(patchify(prepared, self.window))

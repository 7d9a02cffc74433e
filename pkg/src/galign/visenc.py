"""Patch-grid image encoder producing local and global features.

An image is cut into non-overlapping square patches, each flattened patch
runs through a shared linear, ReLU, linear stack to give one local
feature column per patch, and the global feature is a separate linear
projection of the mean hidden (pre-projection) patch feature.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffmath as dm
from . import pgmio
from .diffmath import Node
from .errors import ConfigError, DomainError, ShapeError
from .textenc import glorot_uniform


@dataclass
class ImageSample:
    """A single-channel image with float64 pixels in [0, 1], row-major."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.pixels, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"image pixels must be 2-D, got shape {arr.shape}")
        if arr.size == 0:
            raise ShapeError("image must contain at least one pixel")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise DomainError(
                f"image pixels must lie in [0, 1], got range"
                f" [{arr.min():.4g}, {arr.max():.4g}]"
            )
        self.pixels = arr

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def from_pgm(cls, path: str | Path) -> "ImageSample":
        return cls(pixels=pgmio.read_pgm(path) / 255.0)

    def to_pgm(self, path: str | Path) -> None:
        pgmio.write_pgm(path, np.round(self.pixels * 255.0).astype(np.uint8))


@dataclass
class FeatureGrid:
    """Local features, one column per patch in row-major grid order."""

    features: Node  # (D, M) with M = grid_h * grid_w
    grid_h: int
    grid_w: int
    patch_size: int

    @property
    def dim(self) -> int:
        return self.features.shape[0]

    @property
    def n_patches(self) -> int:
        return self.features.shape[1]


@dataclass
class GlobalFeature:
    """Whole-image feature as a (D, 1) column."""

    feature: Node

    @property
    def dim(self) -> int:
        return self.feature.shape[0]


@dataclass
class VisionParams:
    """Trainable vision-side tensors: shared patch MLP plus two heads."""

    w1: Node  # (hidden, patch_size**2)
    b1: Node  # (hidden, 1)
    w2: Node  # (D, hidden) local head
    b2: Node  # (D, 1)
    wg: Node  # (D, hidden) global head over the mean hidden feature
    bg: Node  # (D, 1)
    patch_size: int

    @property
    def dim(self) -> int:
        return self.w2.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]


def init_vision_params(
    seed: int,
    dim: int = 48,
    patch_size: int = 8,
    hidden: int = 80,
) -> VisionParams:
    """Seeded Glorot-uniform weights; zero hidden bias.

    The output biases ``b2`` and ``bg`` get a small uniform init so a
    patch (or image) whose hidden units are all ReLU-dead still maps to
    a nonzero feature vector instead of an exactly-zero column.
    """
    if dim < 1 or patch_size < 1 or hidden < 1:
        raise ConfigError(
            f"init_vision_params: sizes must be positive, got dim={dim},"
            f" patch_size={patch_size}, hidden={hidden}"
        )
    rng = np.random.default_rng(seed)
    p2 = patch_size * patch_size
    bias_scale = 0.01
    return VisionParams(
        w1=dm.parameter(glorot_uniform(rng, hidden, p2)),
        b1=dm.parameter(np.zeros((hidden, 1))),
        w2=dm.parameter(glorot_uniform(rng, dim, hidden)),
        b2=dm.parameter(rng.uniform(-bias_scale, bias_scale, size=(dim, 1))),
        wg=dm.parameter(glorot_uniform(rng, dim, hidden)),
        bg=dm.parameter(rng.uniform(-bias_scale, bias_scale, size=(dim, 1))),
        patch_size=patch_size,
    )


def patch_columns(pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """Flattened non-overlapping patches as columns, row-major grid order.

    Column ``j`` holds the patch at grid cell ``(j // grid_w, j % grid_w)``.
    """
    h, w = pixels.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(
            f"image size {h}x{w} is not divisible by patch size {patch_size}"
        )
    gh, gw = h // patch_size, w // patch_size
    tiles = pixels.reshape(gh, patch_size, gw, patch_size)
    return tiles.transpose(0, 2, 1, 3).reshape(gh * gw, patch_size * patch_size).T


def encode_image(img: ImageSample, params: VisionParams) -> tuple[FeatureGrid, GlobalFeature]:
    """Local features per patch and a global feature for the whole image."""
    ps = params.patch_size
    cols = patch_columns(img.pixels, ps)
    gh, gw = img.height // ps, img.width // ps
    patches = dm.constant(cols)  # (ps*ps, M)
    h = dm.relu(dm.add(dm.matmul(params.w1, patches), params.b1))  # (hidden, M)
    local = dm.add(dm.matmul(params.w2, h), params.b2)  # (D, M)
    pooled = dm.mean_axis(h, axis=1, keepdims=True)  # (hidden, 1)
    global_ = dm.add(dm.matmul(params.wg, pooled), params.bg)  # (D, 1)
    grid = FeatureGrid(features=local, grid_h=gh, grid_w=gw, patch_size=ps)
    return grid, GlobalFeature(feature=global_)

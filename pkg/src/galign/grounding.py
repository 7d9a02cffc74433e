"""Grounding text queries to image regions and scoring the overlap.

A query sentence is embedded, compared against every local patch feature
by cosine similarity, and the resulting coarse grid is upsampled to pixel
resolution (bilinear by default, with patch centers as interpolation
anchors).  Thresholding the map yields binary masks scored by IoU and
Dice against references, swept over a fixed threshold list.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pgmio
from .errors import DataError, DomainError, ParameterError, ShapeError
from .textenc import embed_report, split_sentences, tokenize_report
from .trainer import Checkpoint, ModelParams
from .visenc import ImageSample, encode_image

DEFAULT_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)


@dataclass
class SimilarityMap:
    """Cosine scores per patch plus their pixel-resolution upsampling."""

    grid: np.ndarray  # (grid_h, grid_w), values in [-1, 1]
    upsampled: np.ndarray  # (height, width)
    patch_size: int

    @property
    def grid_h(self) -> int:
        return self.grid.shape[0]

    @property
    def grid_w(self) -> int:
        return self.grid.shape[1]


@dataclass
class BinaryMask:
    """A boolean pixel mask."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.bits)
        if arr.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {arr.shape}")
        self.bits = arr.astype(bool)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


def _as_bits(mask) -> np.ndarray:
    if isinstance(mask, BinaryMask):
        return mask.bits
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {arr.shape}")
    return arr.astype(bool)


def upsample_map(
    grid: np.ndarray, out_h: int, out_w: int, patch_size: int, method: str = "bilinear"
) -> np.ndarray:
    """Expand a patch-level map to pixel resolution.

    Bilinear interpolation anchors each grid value at its patch center
    pixel and clamps beyond the border cells, so output values never
    leave the range spanned by the grid.  The nearest method repeats each
    cell over its patch.
    """
    gh, gw = grid.shape
    if method == "nearest":
        ys = np.minimum(np.arange(out_h) // patch_size, gh - 1)
        xs = np.minimum(np.arange(out_w) // patch_size, gw - 1)
        return grid[np.ix_(ys, xs)]
    if method != "bilinear":
        raise ParameterError(f"unknown upsampling method {method!r}")
    half = (patch_size - 1) / 2.0
    gy = np.clip((np.arange(out_h) - half) / patch_size, 0.0, gh - 1.0)
    gx = np.clip((np.arange(out_w) - half) / patch_size, 0.0, gw - 1.0)
    y0 = np.floor(gy).astype(int)
    x0 = np.floor(gx).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    ty = (gy - y0)[:, None]
    tx = (gx - x0)[None, :]
    top = (1.0 - tx) * grid[np.ix_(y0, x0)] + tx * grid[np.ix_(y0, x1)]
    bottom = (1.0 - tx) * grid[np.ix_(y1, x0)] + tx * grid[np.ix_(y1, x1)]
    return (1.0 - ty) * top + ty * bottom


def _normalized_columns(values: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(values, axis=0, keepdims=True)
    bad = np.flatnonzero(norms[0] <= 1e-10)
    if bad.size:
        raise DomainError(f"{what}: column {int(bad[0])} has zero norm")
    return values / norms


class _Grounder:
    """Shared forward-pass machinery for single queries and evaluation."""

    def __init__(self, ckpt: Checkpoint, method: str) -> None:
        if method not in ("bilinear", "nearest"):
            raise ParameterError(f"unknown upsampling method {method!r}")
        self.params: ModelParams = ckpt.model_params()
        self.vocab = ckpt.vocab()
        self.method = method

    def patch_scores(self, image: ImageSample) -> tuple[np.ndarray, int, int, int]:
        grid, _ = encode_image(image, self.params.vision)
        vn = _normalized_columns(grid.features.values, "region features")
        return vn, grid.grid_h, grid.grid_w, grid.patch_size

    def sentence_vector(self, sentence: str) -> np.ndarray:
        tok = tokenize_report(sentence, self.vocab)
        emb = embed_report(tok, self.params.text)
        vec = emb.sentences.values[:, 0]
        norm = np.linalg.norm(vec)
        if norm <= 1e-10:
            raise DomainError("sentence embedding has zero norm")
        return vec / norm

    def sentence_map(self, vn: np.ndarray, gh: int, gw: int, ps: int, sentence: str, out_h: int, out_w: int) -> SimilarityMap:
        scores = vn.T @ self.sentence_vector(sentence)  # (M,)
        grid = scores.reshape(gh, gw)
        upsampled = upsample_map(grid, out_h, out_w, ps, self.method)
        return SimilarityMap(grid=grid, upsampled=upsampled, patch_size=ps)


def ground(
    query: str, image: ImageSample, ckpt: Checkpoint, method: str = "bilinear"
) -> SimilarityMap:
    """Similarity map of a text query over the image's patch grid.

    A multi-sentence query is grounded per sentence and combined by
    element-wise maximum (at both grid and pixel resolution), so the map
    highlights regions supporting any of the sentences.
    """
    sentences = split_sentences(query)
    grounder = _Grounder(ckpt, method)
    vn, gh, gw, ps = grounder.patch_scores(image)
    maps = [
        grounder.sentence_map(vn, gh, gw, ps, s, image.height, image.width)
        for s in sentences
    ]
    grid = np.maximum.reduce([m.grid for m in maps])
    upsampled = np.maximum.reduce([m.upsampled for m in maps])
    return SimilarityMap(grid=grid, upsampled=upsampled, patch_size=ps)


def threshold_mask(smap: SimilarityMap, threshold: float) -> BinaryMask:
    """Pixels strictly above the threshold."""
    if not np.isfinite(threshold):
        raise ParameterError(f"threshold must be finite, got {threshold}")
    return BinaryMask(bits=smap.upsampled > threshold)


def argmax_patch(smap: SimilarityMap) -> tuple[int, int]:
    """Grid coordinates (row, col) of the highest-scoring patch."""
    flat = int(np.argmax(smap.grid))
    return flat // smap.grid_w, flat % smap.grid_w


def iou(a, b) -> float:
    """Intersection over union; two empty masks count as a perfect match."""
    bits_a, bits_b = _as_bits(a), _as_bits(b)
    if bits_a.shape != bits_b.shape:
        raise ShapeError(f"mask shapes differ: {bits_a.shape} vs {bits_b.shape}")
    union = np.count_nonzero(bits_a | bits_b)
    if union == 0:
        return 1.0
    return np.count_nonzero(bits_a & bits_b) / union


def dice(a, b) -> float:
    """Dice overlap; two empty masks count as a perfect match."""
    bits_a, bits_b = _as_bits(a), _as_bits(b)
    if bits_a.shape != bits_b.shape:
        raise ShapeError(f"mask shapes differ: {bits_a.shape} vs {bits_b.shape}")
    total = np.count_nonzero(bits_a) + np.count_nonzero(bits_b)
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(bits_a & bits_b) / total


@dataclass
class GroundingMetrics:
    """Threshold sweep results plus their means, optionally per category."""

    per_threshold: list[dict]
    mean_iou: float
    mean_dice: float
    per_category: dict[str, "GroundingMetrics"]

    def to_json_dict(self) -> dict:
        return {
            "per_threshold": self.per_threshold,
            "mean_iou": self.mean_iou,
            "mean_dice": self.mean_dice,
            "per_category": {
                name: sub.to_json_dict() for name, sub in self.per_category.items()
            },
        }


def _metrics_for_units(
    units: list[tuple[np.ndarray, np.ndarray]], thresholds: Sequence[float]
) -> GroundingMetrics:
    """Sweep thresholds over (upsampled map, reference mask) pairs."""
    rows = []
    for t in thresholds:
        iou_sum = 0.0
        dice_sum = 0.0
        for upsampled, mask in units:
            predicted = upsampled > t
            iou_sum += iou(predicted, mask)
            dice_sum += dice(predicted, mask)
        rows.append(
            {
                "threshold": float(t),
                "iou": iou_sum / len(units),
                "dice": dice_sum / len(units),
            }
        )
    mean_iou = sum(r["iou"] for r in rows) / len(rows)
    mean_dice = sum(r["dice"] for r in rows) / len(rows)
    return GroundingMetrics(
        per_threshold=rows, mean_iou=mean_iou, mean_dice=mean_dice, per_category={}
    )


def evaluate(
    samples: Sequence,
    ckpt: Checkpoint,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    method: str = "bilinear",
) -> GroundingMetrics:
    """Ground every sentence of every sample and score it against its mask.

    Samples must carry ``id``, ``image``, ``report``, ``masks`` (one per
    sentence), and ``categories``.  The aggregate metrics are means over
    (sample, sentence) units, swept over thresholds; the breakdown groups
    units by their category label.  Units are processed in sorted id
    order, so the result does not depend on dataset ordering.
    """
    if not samples:
        raise DataError("evaluate: empty dataset")
    if not thresholds:
        raise ParameterError("evaluate: need at least one threshold")
    grounder = _Grounder(ckpt, method)

    units: list[tuple[np.ndarray, np.ndarray]] = []
    labels: list[str] = []
    for sample in sorted(samples, key=lambda s: s.id):
        sentences = split_sentences(sample.report)
        masks = sample.masks
        if not masks:
            raise DataError(f"sample {sample.id}: no reference masks")
        if len(masks) != len(sentences):
            raise DataError(
                f"sample {sample.id}: {len(sentences)} sentences but"
                f" {len(masks)} masks"
            )
        vn, gh, gw, ps = grounder.patch_scores(sample.image)
        for sentence, mask, category in zip(sentences, masks, sample.categories):
            smap = grounder.sentence_map(
                vn, gh, gw, ps, sentence, sample.image.height, sample.image.width
            )
            bits = _as_bits(mask)
            if bits.shape != smap.upsampled.shape:
                raise DataError(
                    f"sample {sample.id}: mask shape {bits.shape} does not"
                    f" match image shape {smap.upsampled.shape}"
                )
            units.append((smap.upsampled, bits))
            labels.append(category)

    overall = _metrics_for_units(units, thresholds)
    for category in sorted(set(labels)):
        subset = [u for u, c in zip(units, labels) if c == category]
        overall.per_category[category] = _metrics_for_units(subset, thresholds)
    return overall


def heatmap_to_pgm(smap: SimilarityMap, path: str | Path) -> None:
    """Store the upsampled map with [-1, 1] linearly mapped to [0, 255]."""
    scaled = np.clip((smap.upsampled + 1.0) * 0.5, 0.0, 1.0)
    pgmio.write_pgm(path, np.round(scaled * 255.0).astype(np.uint8))


def mask_to_pgm(mask: BinaryMask, path: str | Path) -> None:
    pgmio.write_pgm(path, np.where(_as_bits(mask), 255, 0).astype(np.uint8))

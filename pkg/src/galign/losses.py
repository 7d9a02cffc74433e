"""The joint contrastive objective: global and sentence-level local terms.

All scores are cosine similarities between L2-normalized features, and
every temperature enters as ``exp(score / tau)``.  The global term is a
symmetric InfoNCE over whole-image and whole-report features.  The local
term scores each (image, report) pair by attending sentence embeddings
over region features, matching each sentence against its attention
context, and pooling sentence matches with a temperature-weighted smooth
maximum; the resulting pair scores feed the same symmetric InfoNCE.

Everything is composed from diffmath nodes, so one backward call on the
total differentiates the whole objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Node
from .errors import ContractError, DomainError, ParameterError, ShapeError
from .textenc import TextEmbeddings
from .visenc import FeatureGrid, GlobalFeature


@dataclass(frozen=True)
class LossConfig:
    """Temperatures for the three score families.

    ``tau1`` scales the InfoNCE logits (global and pairwise local),
    ``tau2`` the region-attention softmax, and ``tau3`` the smooth
    maximum over sentence matches.  ``strict_eq4_log`` switches the
    attention weights to their logarithms; the default keeps plain
    softmax weights.
    """

    tau1: float = 0.1
    tau2: float = 0.1
    tau3: float = 10.0
    strict_eq4_log: bool = False

    def __post_init__(self) -> None:
        for name in ("tau1", "tau2", "tau3"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0.0:
                raise ParameterError(
                    f"LossConfig: {name} must be finite and > 0, got {value}"
                )


class PairedItem(NamedTuple):
    """One aligned sample: report embeddings plus both image features."""

    text: TextEmbeddings
    grid: FeatureGrid
    global_feature: GlobalFeature


@dataclass
class PairedBatch:
    """Aligned (report, image) items sharing one feature dimension."""

    items: list[PairedItem]

    def __post_init__(self) -> None:
        if not self.items:
            raise ContractError("PairedBatch: need at least one item")
        dims = {
            (it.text.dim, it.grid.dim, it.global_feature.dim) for it in self.items
        }
        if len(dims) != 1 or len(set(dims.pop())) != 1:
            raise ShapeError(
                "PairedBatch: all text, grid, and global features must share"
                " one embedding dimension"
            )

    def __len__(self) -> int:
        return len(self.items)

    @property
    def dim(self) -> int:
        return self.items[0].text.dim


@dataclass
class LossBreakdown:
    """The four contrastive components and their sum."""

    global_image_to_text: Node
    global_text_to_image: Node
    local_image_to_text: Node
    local_text_to_image: Node
    total: Node

    def __post_init__(self) -> None:
        for node in self.components():
            if node.item() < -1e-12:
                raise ContractError(
                    f"loss component is negative beyond tolerance: {node.item()}"
                )

    def components(self) -> tuple[Node, Node, Node, Node]:
        return (
            self.global_image_to_text,
            self.global_text_to_image,
            self.local_image_to_text,
            self.local_text_to_image,
        )


def _sum_all(node: Node) -> Node:
    out = node
    while out.ndim > 0:
        out = dm.sum_axis(out, axis=0)
    return out


def _diagonal_nll(logits: Node) -> Node:
    """Mean over rows of (logsumexp(row) - diagonal entry)."""
    b = logits.shape[0]
    eye = dm.constant(np.eye(b))
    lse = dm.logsumexp_rows(logits)  # (B, 1)
    diag = dm.elementwise_mul(logits, eye)
    return dm.scale(dm.sub(_sum_all(lse), _sum_all(diag)), 1.0 / b)


def _checked_normalize(features: Node, what: str) -> Node:
    try:
        return dm.l2_normalize_cols(features)
    except DomainError as err:
        raise DomainError(f"{what}: {err}") from err


def global_loss(batch: PairedBatch, cfg: LossConfig) -> tuple[Node, Node]:
    """Symmetric InfoNCE over cosine scores of global features.

    Returns the image-to-text and text-to-image components; the positive
    pair for row i is column i.
    """
    v = dm.concat_cols([it.global_feature.feature for it in batch.items])  # (D, B)
    t = dm.concat_cols([it.text.report for it in batch.items])  # (D, B)
    vn = _checked_normalize(v, "global image features")
    tn = _checked_normalize(t, "global report features")
    sim = dm.matmul(dm.transpose(vn), tn)  # (B, B), rows are images
    logits = dm.scale(sim, 1.0 / cfg.tau1)
    image_to_text = _diagonal_nll(logits)
    text_to_image = _diagonal_nll(dm.transpose(logits))
    return image_to_text, text_to_image


def local_similarity(grid: FeatureGrid, sentences: Node) -> Node:
    """Region-by-sentence cosine matrix: entry (j, i) is cos(v_j, t_i)."""
    vn = _checked_normalize(grid.features, "region features")
    tn = _checked_normalize(sentences, "sentence embeddings")
    return dm.matmul(dm.transpose(vn), tn)  # (M, P)


def context_features(
    s: Node, grid: FeatureGrid, tau2: float, strict_log: bool = False
) -> Node:
    """Attention contexts, one column per sentence.

    Each sentence attends over regions with softmax(s / tau2) weights and
    sums normalized region features.  With ``strict_log`` the weights are
    replaced by their logarithms.
    """
    if s.shape[0] != grid.n_patches:
        raise ShapeError(
            f"context_features: similarity has {s.shape[0]} regions but the"
            f" grid has {grid.n_patches}"
        )
    weights = dm.softmax_rows(dm.transpose(s), temperature=tau2)  # (P, M)
    if strict_log:
        weights = dm.log(weights)
    vn = _checked_normalize(grid.features, "region features")  # (D, M)
    return dm.matmul(vn, dm.transpose(weights))  # (D, P)


def match_score(context: Node, sentences: Node, tau3: float) -> Node:
    """Smooth maximum of per-sentence cosine matches, as a (1, 1) node.

    With a single sentence this reduces to exactly that sentence's cosine
    match (the temperature cancels).
    """
    if context.shape != sentences.shape:
        raise ShapeError(
            f"match_score: context shape {context.shape} does not match"
            f" sentences shape {sentences.shape}"
        )
    cn = _checked_normalize(context, "context features")
    tn = _checked_normalize(sentences, "sentence embeddings")
    matches = dm.sum_axis(dm.elementwise_mul(cn, tn), axis=0, keepdims=True)  # (1, P)
    return dm.scale(dm.logsumexp_rows(matches, temperature=tau3), tau3)  # (1, 1)


def pair_scores(batch: PairedBatch, cfg: LossConfig) -> Node:
    """All-pairs local match scores as a (B, B) node; rows are images."""
    b = len(batch)
    columns: list[Node] = []
    for k in range(b):
        sentences = batch.items[k].text.sentences
        entries: list[Node] = []
        for i in range(b):
            grid = batch.items[i].grid
            s = local_similarity(grid, sentences)
            c = context_features(s, grid, cfg.tau2, strict_log=cfg.strict_eq4_log)
            entries.append(match_score(c, sentences, cfg.tau3))
        columns.append(dm.transpose(dm.concat_cols(entries)))  # (B, 1)
    return dm.concat_cols(columns)  # (B, B)


def local_loss(batch: PairedBatch, cfg: LossConfig) -> tuple[Node, Node]:
    """Symmetric InfoNCE over the pairwise local match scores."""
    logits = dm.scale(pair_scores(batch, cfg), 1.0 / cfg.tau1)
    image_to_text = _diagonal_nll(logits)
    text_to_image = _diagonal_nll(dm.transpose(logits))
    return image_to_text, text_to_image


def total_loss(batch: PairedBatch, cfg: LossConfig) -> LossBreakdown:
    """All four components plus their sum, ready for one backward pass."""
    g_vt, g_tv = global_loss(batch, cfg)
    l_vt, l_tv = local_loss(batch, cfg)
    total = dm.add(dm.add(g_vt, g_tv), dm.add(l_vt, l_tv))
    return LossBreakdown(
        global_image_to_text=g_vt,
        global_text_to_image=g_tv,
        local_image_to_text=l_vt,
        local_text_to_image=l_tv,
        total=total,
    )

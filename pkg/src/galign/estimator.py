"""Scikit-learn style facade over training and grounding.

``SentenceGrounder`` wraps vocabulary construction, the contrastive
training loop, and query grounding behind the familiar fit / transform /
predict / score surface.  A sample is an ``(image, text)`` pair: at fit
time the text is the paired report, afterwards it is the query to
localize in the image.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import DataError
from .grounding import (
    BinaryMask,
    SimilarityMap,
    ground,
    iou,
    threshold_mask,
)
from .losses import LossConfig
from .textenc import Vocab
from .trainer import Checkpoint, ModelConfig, TrainConfig, train
from .visenc import ImageSample


def _as_image(obj) -> ImageSample:
    if isinstance(obj, ImageSample):
        return obj
    return ImageSample(pixels=np.asarray(obj, dtype=float))


def _as_pairs(X) -> list[tuple[ImageSample, str]]:
    pairs = []
    for i, item in enumerate(X):
        try:
            image, text = item
        except (TypeError, ValueError):
            raise DataError(
                f"sample {i}: expected an (image, text) pair, got {type(item).__name__}"
            ) from None
        if not isinstance(text, str):
            raise DataError(f"sample {i}: text must be a string, got {type(text).__name__}")
        pairs.append((_as_image(image), text))
    if not pairs:
        raise DataError("need at least one (image, text) pair")
    return pairs


class SentenceGrounder(BaseEstimator):
    """Localize sentences in images after contrastive training on pairs.

    Parameters mirror the training configuration; all are plain keyword
    arguments so the estimator composes with scikit-learn tooling
    (``get_params`` / ``set_params`` / ``clone``).

    Fitted attributes: ``vocab_``, ``checkpoint_``, ``history_`` (one log
    entry per epoch), ``n_iter_`` (epochs completed).
    """

    def __init__(
        self,
        dim: int = 48,
        patch_size: int = 8,
        text_hidden: int = 48,
        vision_hidden: int = 80,
        table_init_scale: float = 3e-3,
        lr0: float = 2e-5,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        decay: float = 0.9,
        batch_size: int = 32,
        epochs: int = 4,
        tau1: float = 0.1,
        tau2: float = 0.1,
        tau3: float = 10.0,
        strict_eq4_log: bool = False,
        threshold: float = 0.3,
        upsample: str = "bilinear",
        seed: int = 0,
    ) -> None:
        self.dim = dim
        self.patch_size = patch_size
        self.text_hidden = text_hidden
        self.vision_hidden = vision_hidden
        self.table_init_scale = table_init_scale
        self.lr0 = lr0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.decay = decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.tau1 = tau1
        self.tau2 = tau2
        self.tau3 = tau3
        self.strict_eq4_log = strict_eq4_log
        self.threshold = threshold
        self.upsample = upsample
        self.seed = seed

    # -- configuration ------------------------------------------------------

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr0=self.lr0,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            decay=self.decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            loss=LossConfig(
                tau1=self.tau1,
                tau2=self.tau2,
                tau3=self.tau3,
                strict_eq4_log=self.strict_eq4_log,
            ),
            model=ModelConfig(
                dim=self.dim,
                patch_size=self.patch_size,
                text_hidden=self.text_hidden,
                vision_hidden=self.vision_hidden,
                table_init_scale=self.table_init_scale,
            ),
        )

    def _check_fitted(self) -> None:
        if not hasattr(self, "checkpoint_"):
            raise NotFittedError(
                "this SentenceGrounder is not fitted yet; call fit first"
            )

    # -- estimator surface ---------------------------------------------------

    def fit(self, X, y=None) -> "SentenceGrounder":
        """Train on (image, report) pairs; ``y`` is ignored.

        The vocabulary is built from the report texts, then both encoders
        are optimized with the paired contrastive objective.
        """
        pairs = _as_pairs(X)
        cfg = self._train_config()
        vocab = Vocab.from_texts(text for _, text in pairs)
        ckpt, logs = train(pairs, vocab, cfg)
        self.vocab_ = vocab
        self.checkpoint_ = ckpt
        self.history_ = logs
        self.n_iter_ = len(logs)
        return self

    def transform(self, X) -> list[SimilarityMap]:
        """Similarity map per (image, query) pair."""
        self._check_fitted()
        return [
            ground(text, image, self.checkpoint_, method=self.upsample)
            for image, text in _as_pairs(X)
        ]

    def predict(self, X) -> list[BinaryMask]:
        """Binary mask per (image, query) pair at ``self.threshold``."""
        return [threshold_mask(m, self.threshold) for m in self.transform(X)]

    def score(self, X, y) -> float:
        """Mean IoU between predicted masks and reference masks ``y``."""
        predicted = self.predict(X)
        references = list(y)
        if len(references) != len(predicted):
            raise DataError(
                f"got {len(predicted)} pairs but {len(references)} reference masks"
            )
        return float(
            np.mean([iou(p, ref) for p, ref in zip(predicted, references)])
        )

    def ground(self, query: str, image) -> SimilarityMap:
        """Similarity map for one query over one image."""
        self._check_fitted()
        return ground(query, _as_image(image), self.checkpoint_, method=self.upsample)

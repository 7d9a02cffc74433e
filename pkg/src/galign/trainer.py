"""Adam training loop over paired (image, report) data, with checkpoints.

Training is fully deterministic given a seed: parameter init, epoch
shuffles, and batch assembly all draw from generators derived from the
single config seed.  Incomplete trailing batches are dropped.  The
checkpoint captures parameters, optimizer moments, the epoch counter,
and the shuffle generator state, so resuming reproduces an uninterrupted
run bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .errors import CheckpointError, ConfigError, DomainError
from .losses import LossConfig, PairedBatch, PairedItem, total_loss
from .textenc import TextParams, Vocab, embed_report, init_text_params, tokenize_report
from .visenc import ImageSample, VisionParams, encode_image, init_vision_params

MAGIC = b"GALN"
FORMAT_VERSION = 1

PARAM_NAMES = (
    "text.table",
    "text.w1",
    "text.b1",
    "text.w2",
    "text.b2",
    "vision.w1",
    "vision.b1",
    "vision.w2",
    "vision.b2",
    "vision.wg",
    "vision.bg",
)


@dataclass(frozen=True)
class ModelConfig:
    """Sizes for both encoders; the feature dimension is shared."""

    dim: int = 48
    patch_size: int = 8
    text_hidden: int = 48
    vision_hidden: int = 80
    table_init_scale: float = 3e-3

    def __post_init__(self) -> None:
        for name in ("dim", "patch_size", "text_hidden", "vision_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ModelConfig: {name} must be >= 1")
        if self.table_init_scale <= 0:
            raise ConfigError("ModelConfig: table_init_scale must be > 0")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; defaults are the desk-scale training recipe."""

    lr0: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.9
    batch_size: int = 32
    epochs: int = 4
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self) -> None:
        if not (np.isfinite(self.lr0) and self.lr0 >= 0.0):
            raise ConfigError(f"TrainConfig: lr0 must be finite and >= 0, got {self.lr0}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ConfigError(f"TrainConfig: {name} must lie in [0, 1), got {b}")
        if self.eps <= 0.0:
            raise ConfigError(f"TrainConfig: eps must be > 0, got {self.eps}")
        if not (np.isfinite(self.decay) and 0.0 < self.decay <= 1.0):
            raise ConfigError(f"TrainConfig: decay must lie in (0, 1], got {self.decay}")
        if self.batch_size < 1:
            raise ConfigError(f"TrainConfig: batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"TrainConfig: epochs must be >= 1, got {self.epochs}")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Exponentially decayed rate: lr0 * decay ** epoch, epoch counted from 0."""
    if epoch < 0:
        raise ConfigError(f"lr_at_epoch: epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.decay**epoch


@dataclass
class ModelParams:
    """Both encoders' trainable tensors, addressable by canonical name."""

    text: TextParams
    vision: VisionParams

    def named(self) -> list[tuple[str, dm.Node]]:
        t, v = self.text, self.vision
        return [
            ("text.table", t.table),
            ("text.w1", t.w1),
            ("text.b1", t.b1),
            ("text.w2", t.w2),
            ("text.b2", t.b2),
            ("vision.w1", v.w1),
            ("vision.b1", v.b1),
            ("vision.w2", v.w2),
            ("vision.b2", v.b2),
            ("vision.wg", v.wg),
            ("vision.bg", v.bg),
        ]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: node.values for name, node in self.named()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], patch_size: int) -> "ModelParams":
        missing = [n for n in PARAM_NAMES if n not in arrays]
        if missing:
            raise CheckpointError(f"missing parameter tensors: {missing}")
        p = {name: dm.parameter(arrays[name]) for name in PARAM_NAMES}
        text = TextParams(
            table=p["text.table"], w1=p["text.w1"], b1=p["text.b1"],
            w2=p["text.w2"], b2=p["text.b2"],
        )
        vision = VisionParams(
            w1=p["vision.w1"], b1=p["vision.b1"], w2=p["vision.w2"],
            b2=p["vision.b2"], wg=p["vision.wg"], bg=p["vision.bg"],
            patch_size=patch_size,
        )
        return cls(text=text, vision=vision)

    @classmethod
    def init(cls, model: ModelConfig, vocab_size: int, seed: int) -> "ModelParams":
        text_seed, vision_seed = (
            int(s) for s in np.random.SeedSequence(seed).generate_state(2)
        )
        text = init_text_params(
            text_seed,
            vocab_size,
            dim=model.dim,
            hidden=model.text_hidden,
            table_scale=model.table_init_scale,
        )
        vision = init_vision_params(
            vision_seed,
            dim=model.dim,
            patch_size=model.patch_size,
            hidden=model.vision_hidden,
        )
        return cls(text=text, vision=vision)


@dataclass
class AdamState:
    """First and second moment estimates plus the shared step counter."""

    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, values: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros_like(a) for k, a in values.items()},
            v={k: np.zeros_like(a) for k, a in values.items()},
        )


def adam_step(
    values: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; mutates ``state`` and returns new values."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    out: dict[str, np.ndarray] = {}
    for name, p in values.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise DomainError(f"non-finite gradient for parameter '{name}'")
        m = state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return out


@dataclass
class EpochLog:
    """Per-epoch means of the loss components, ready for JSONL export."""

    epoch: int
    lr: float
    g_vt: float
    g_tv: float
    l_vt: float
    l_tv: float
    total: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "lr": self.lr,
                "g_vt": self.g_vt,
                "g_tv": self.g_tv,
                "l_vt": self.l_vt,
                "l_tv": self.l_tv,
                "total": self.total,
            }
        )


def write_loss_log(logs: Sequence[EpochLog], path: str | Path) -> None:
    Path(path).write_text("".join(log.to_json() + "\n" for log in logs), encoding="utf-8")


@dataclass
class Checkpoint:
    """A self-contained training snapshot: tensors, optimizer, config, vocab."""

    params: dict[str, np.ndarray]
    adam: AdamState
    epoch: int
    rng_state: dict
    config: TrainConfig
    vocab_pieces: tuple[str, ...]

    def vocab(self) -> Vocab:
        return Vocab(pieces=tuple(self.vocab_pieces))

    def model_params(self) -> ModelParams:
        return ModelParams.from_arrays(self.params, self.config.model.patch_size)

    # -- serialization ----------------------------------------------------

    def _tensor_items(self) -> list[tuple[str, np.ndarray]]:
        items = [(name, self.params[name]) for name in PARAM_NAMES]
        items += [(f"adam.m.{name}", self.adam.m[name]) for name in PARAM_NAMES]
        items += [(f"adam.v.{name}", self.adam.v[name]) for name in PARAM_NAMES]
        return items

    def save(self, path: str | Path) -> None:
        meta = {
            "adam_step": self.adam.step,
            "config": dataclasses.asdict(self.config),
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "vocab": list(self.vocab_pieces),
        }
        blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
        chunks.append(struct.pack("<I", len(blob)))
        chunks.append(blob)
        tensors = self._tensor_items()
        chunks.append(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<B", arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        Path(path).write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        view = memoryview(raw)

        def take(n: int) -> memoryview:
            nonlocal view
            if len(view) < n:
                raise CheckpointError(f"{path}: truncated checkpoint")
            out, view = view[:n], view[n:]
            return out

        if bytes(take(4)) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
        (version,) = struct.unpack("<I", take(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format version {version}, expected {FORMAT_VERSION}"
            )
        (json_len,) = struct.unpack("<I", take(4))
        try:
            meta = json.loads(bytes(take(json_len)).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise CheckpointError(f"{path}: corrupt config snapshot: {err}") from err
        (n_tensors,) = struct.unpack("<I", take(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", take(2))
            name = bytes(take(name_len)).decode("utf-8")
            (ndim,) = struct.unpack("<B", take(1))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
            tensors[name] = data.copy()
        if len(view):
            raise CheckpointError(f"{path}: {len(view)} trailing bytes")

        try:
            cfg_dict = dict(meta["config"])
            cfg = TrainConfig(
                **{
                    **{
                        k: v
                        for k, v in cfg_dict.items()
                        if k not in ("loss", "model")
                    },
                    "loss": LossConfig(**cfg_dict["loss"]),
                    "model": ModelConfig(**cfg_dict["model"]),
                }
            )
            params = {name: tensors[name] for name in PARAM_NAMES}
            adam = AdamState(
                step=int(meta["adam_step"]),
                m={name: tensors[f"adam.m.{name}"] for name in PARAM_NAMES},
                v={name: tensors[f"adam.v.{name}"] for name in PARAM_NAMES},
            )
            return cls(
                params=params,
                adam=adam,
                epoch=int(meta["epoch"]),
                rng_state=meta["rng_state"],
                config=cfg,
                vocab_pieces=tuple(meta["vocab"]),
            )
        except (KeyError, TypeError, ConfigError) as err:
            raise CheckpointError(f"{path}: incomplete checkpoint: {err}") from err


PairedDataset = Sequence[tuple[ImageSample, str]]


def _resume_compatible(cfg: TrainConfig, ckpt: Checkpoint) -> None:
    ours = dataclasses.asdict(cfg)
    theirs = dataclasses.asdict(ckpt.config)
    ours.pop("epochs")
    theirs.pop("epochs")
    if ours != theirs:
        raise CheckpointError(
            "resume config differs from the checkpoint config in fields other"
            " than epochs"
        )
    if cfg.epochs < ckpt.epoch:
        raise ConfigError(
            f"cannot resume: checkpoint has completed {ckpt.epoch} epochs,"
            f" config asks for {cfg.epochs}"
        )


def train(
    pairs: PairedDataset,
    vocab: Vocab,
    cfg: TrainConfig,
    resume: Checkpoint | None = None,
) -> tuple[Checkpoint, list[EpochLog]]:
    """Run (or continue) training and return the checkpoint plus epoch logs.

    ``pairs`` holds (image, report text) tuples.  With ``resume`` given,
    optimization continues from the stored state through ``cfg.epochs``
    total epochs; all other config fields must match the checkpoint.
    """
    n = len(pairs)
    if n < cfg.batch_size:
        raise ConfigError(
            f"dataset has {n} pairs but one batch needs {cfg.batch_size}"
        )
    tokenized = [tokenize_report(report, vocab) for _, report in pairs]

    rng = np.random.default_rng(cfg.seed)
    if resume is not None:
        _resume_compatible(cfg, resume)
        if tuple(resume.vocab_pieces) != vocab.pieces:
            raise CheckpointError("resume vocabulary differs from the checkpoint")
        params = resume.model_params()
        adam = AdamState(
            step=resume.adam.step,
            m={k: a.copy() for k, a in resume.adam.m.items()},
            v={k: a.copy() for k, a in resume.adam.v.items()},
        )
        rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch
    else:
        params = ModelParams.init(cfg.model, len(vocab), cfg.seed)
        adam = AdamState.zeros(params.arrays())
        start_epoch = 0

    logs: list[EpochLog] = []
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        perm = rng.permutation(n)
        sums = np.zeros(5)
        n_batches = 0
        for lo in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            batch_idx = perm[lo : lo + cfg.batch_size]
            items = []
            for j in batch_idx:
                image, _ = pairs[j]
                grid, glob = encode_image(image, params.vision)
                text = embed_report(tokenized[j], params.text)
                items.append(PairedItem(text=text, grid=grid, global_feature=glob))
            breakdown = total_loss(PairedBatch(items=items), cfg.loss)
            dm.backward(breakdown.total)
            grads = {name: node.grad for name, node in params.named()}
            new_values = adam_step(params.arrays(), grads, adam, lr, cfg)
            params = ModelParams.from_arrays(new_values, cfg.model.patch_size)
            sums += [
                breakdown.global_image_to_text.item(),
                breakdown.global_text_to_image.item(),
                breakdown.local_image_to_text.item(),
                breakdown.local_text_to_image.item(),
                breakdown.total.item(),
            ]
            n_batches += 1
        means = sums / n_batches
        logs.append(
            EpochLog(
                epoch=epoch,
                lr=float(lr),
                g_vt=float(means[0]),
                g_tv=float(means[1]),
                l_vt=float(means[2]),
                l_tv=float(means[3]),
                total=float(means[4]),
            )
        )

    checkpoint = Checkpoint(
        params=params.arrays(),
        adam=adam,
        epoch=cfg.epochs,
        rng_state=rng.bit_generator.state,
        config=cfg,
        vocab_pieces=vocab.pieces,
    )
    return checkpoint, logs

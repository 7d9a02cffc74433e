"""Synthetic localization benchmark: shapes on noise with templated reports.

Each image places one or more lesions (simple geometric shapes) into
distinct cells of a coarse 3x3 grid, with per-lesion jitter constrained
so the support stays inside its cell.  Each lesion yields one templated
sentence ("large ring lower left.") and one pixel-exact binary mask, so
grounding quality can be scored without any annotation slack.

Generation is deterministic: every sample draws from its own generator
seeded by (spec seed, split, index), so datasets are reproducible and
individual samples can be regenerated in isolation.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pgmio
from .errors import ConfigError, DataError
from .textenc import Vocab
from .visenc import ImageSample

ROW_WORDS = ("upper", "middle", "lower")
COL_WORDS = ("left", "center", "right")
SHAPE_WORDS = ("blob", "ring", "bar", "cross")
SIZE_WORDS = ("small", "large")
SIZE_RADIUS = {"small": 4, "large": 8}

ALL_POSITIONS = tuple(f"{r} {c}" for r in ROW_WORDS for c in COL_WORDS)

_SPLIT_TAGS = {"train": 0, "test": 1}

BACKGROUND = 0.1
FOREGROUND = 0.9


def coarse_cell_bounds(image_size: int) -> list[int]:
    """Pixel boundaries of the 3x3 coarse grid: [0, s//3, 2s//3, s]."""
    return [0, image_size // 3, (2 * image_size) // 3, image_size]


def render_shape(shape: str, size: str, cy: int, cx: int, image_size: int) -> np.ndarray:
    """Boolean support mask of one lesion centered at (cy, cx).

    Every shape fits inside the square of half-extent ``SIZE_RADIUS[size]``
    around its center.
    """
    if shape not in SHAPE_WORDS:
        raise ConfigError(f"unknown shape {shape!r}")
    if size not in SIZE_RADIUS:
        raise ConfigError(f"unknown size {size!r}")
    r = SIZE_RADIUS[size]
    yy, xx = np.ogrid[:image_size, :image_size]
    dy = yy - cy
    dx = xx - cx
    dist2 = dy * dy + dx * dx
    if shape == "blob":
        return dist2 <= r * r
    if shape == "ring":
        inner = r // 2
        return (dist2 <= r * r) & (dist2 > inner * inner)
    thickness = max(1, r // 3)
    horizontal = (np.abs(dy) <= thickness) & (np.abs(dx) <= r)
    if shape == "bar":
        return horizontal
    vertical = (np.abs(dx) <= thickness) & (np.abs(dy) <= r)
    return horizontal | vertical  # cross


@dataclass(frozen=True)
class SynthSpec:
    """What to generate: geometry, attribute inventory, counts, and seed."""

    image_size: int = 64
    shapes: tuple[str, ...] = SHAPE_WORDS
    positions: tuple[str, ...] = ALL_POSITIONS
    sizes: tuple[str, ...] = SIZE_WORDS
    lesions_per_image: tuple[int, int] = (1, 3)
    noise: float = 0.003
    train_count: int = 400
    test_count: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if self.image_size < 9:
            raise ConfigError(f"image_size must be at least 9, got {self.image_size}")
        if len(self.shapes) < 2 or any(s not in SHAPE_WORDS for s in self.shapes):
            raise ConfigError(
                f"need at least two shapes from {SHAPE_WORDS}, got {self.shapes}"
            )
        if len(self.positions) < 2 or any(p not in ALL_POSITIONS for p in self.positions):
            raise ConfigError(
                f"need at least two positions from the 3x3 grid, got {self.positions}"
            )
        if not self.sizes or any(s not in SIZE_WORDS for s in self.sizes):
            raise ConfigError(f"sizes must be drawn from {SIZE_WORDS}, got {self.sizes}")
        lo, hi = self.lesions_per_image
        if not 1 <= lo <= hi:
            raise ConfigError(f"lesions_per_image bounds must satisfy 1 <= lo <= hi, got {lo}..{hi}")
        if hi > len(self.positions):
            raise ConfigError(
                f"cannot place up to {hi} non-overlapping lesions in only"
                f" {len(self.positions)} cells"
            )
        if not 0.0 <= self.noise < 0.4:
            raise ConfigError(f"noise must lie in [0, 0.4), got {self.noise}")
        if self.train_count < 1 or self.test_count < 0:
            raise ConfigError("train_count must be >= 1 and test_count >= 0")
        bounds = coarse_cell_bounds(self.image_size)
        min_extent = min(b - a for a, b in zip(bounds, bounds[1:]))
        for size in self.sizes:
            r = SIZE_RADIUS[size]
            if min_extent - 1 - 2 * r < 0:
                raise ConfigError(
                    f"coarse cells of extent {min_extent} cannot contain a"
                    f" {size!r} lesion of radius {r}"
                )

    def vocabulary(self) -> Vocab:
        words = set(self.shapes) | set(self.sizes)
        for pos in self.positions:
            words.update(pos.split())
        return Vocab.build(sorted(words))


@dataclass(frozen=True)
class Lesion:
    """Attributes and exact center of one placed lesion."""

    shape: str
    size: str
    row: str
    col: str
    cy: int
    cx: int

    @property
    def sentence(self) -> str:
        return f"{self.size} {self.shape} {self.row} {self.col}"


@dataclass
class SynthSample:
    """One benchmark item: image, report, and per-sentence exact masks."""

    id: int
    split: str
    image: ImageSample
    report: str
    masks: list[np.ndarray]
    lesions: list[Lesion]

    @property
    def category(self) -> str:
        return self.lesions[0].shape

    @property
    def categories(self) -> list[str]:
        return [lesion.shape for lesion in self.lesions]


def _jitter_range(lo: int, hi: int, radius: int) -> tuple[int, int]:
    return lo + radius, hi - 1 - radius


def _make_sample(spec: SynthSpec, split: str, index: int, sample_id: int) -> SynthSample:
    rng = np.random.default_rng([spec.seed, _SPLIT_TAGS[split], index])
    lo, hi = spec.lesions_per_image
    count = int(rng.integers(lo, hi + 1))
    cell_ids = rng.choice(len(spec.positions), size=count, replace=False)

    bounds = coarse_cell_bounds(spec.image_size)
    lesions: list[Lesion] = []
    masks: list[np.ndarray] = []
    base = np.full((spec.image_size, spec.image_size), BACKGROUND)
    for cell_id in cell_ids:
        row_word, col_word = spec.positions[int(cell_id)].split()
        r_idx = ROW_WORDS.index(row_word)
        c_idx = COL_WORDS.index(col_word)
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        size = spec.sizes[int(rng.integers(len(spec.sizes)))]
        radius = SIZE_RADIUS[size]
        y_lo, y_hi = _jitter_range(bounds[r_idx], bounds[r_idx + 1], radius)
        x_lo, x_hi = _jitter_range(bounds[c_idx], bounds[c_idx + 1], radius)
        cy = int(rng.integers(y_lo, y_hi + 1))
        cx = int(rng.integers(x_lo, x_hi + 1))
        mask = render_shape(shape, size, cy, cx, spec.image_size)
        lesions.append(Lesion(shape=shape, size=size, row=row_word, col=col_word, cy=cy, cx=cx))
        masks.append(mask)
        base[mask] = FOREGROUND

    for a in range(len(masks)):
        for b in range(a + 1, len(masks)):
            if np.any(masks[a] & masks[b]):
                raise ConfigError("internal: lesion masks overlap despite distinct cells")

    pixels = base
    if spec.noise > 0.0:
        pixels = np.clip(base + spec.noise * rng.standard_normal(base.shape), 0.0, 1.0)
    report = "\n".join(lesion.sentence + "." for lesion in lesions)
    return SynthSample(
        id=sample_id,
        split=split,
        image=ImageSample(pixels=pixels),
        report=report,
        masks=masks,
        lesions=lesions,
    )


def generate(spec: SynthSpec) -> tuple[list[SynthSample], list[SynthSample], Vocab]:
    """Materialize both splits and the matching vocabulary."""
    train = [_make_sample(spec, "train", i, i) for i in range(spec.train_count)]
    test = [
        _make_sample(spec, "test", i, spec.train_count + i)
        for i in range(spec.test_count)
    ]
    return train, test, spec.vocabulary()


# ---------------------------------------------------------------------------
# On-disk layout
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"
VOCAB_NAME = "vocab.txt"


def _image_name(sample_id: int) -> str:
    return f"img_{sample_id:05d}.pgm"


def _report_name(sample_id: int) -> str:
    return f"report_{sample_id:05d}.txt"


def _mask_name(sample_id: int, sentence_idx: int) -> str:
    return f"mask_{sample_id:05d}_{sentence_idx}.pgm"


def write_dataset(
    directory: str | Path,
    train: list[SynthSample],
    test: list[SynthSample],
    vocab: Vocab,
    spec: SynthSpec,
) -> None:
    """Write images, reports, masks, the vocabulary, and a manifest."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / VOCAB_NAME)
    entries = []
    for sample in list(train) + list(test):
        sample.image.to_pgm(out / _image_name(sample.id))
        (out / _report_name(sample.id)).write_text(sample.report + "\n", encoding="utf-8")
        mask_names = []
        for s_idx, mask in enumerate(sample.masks):
            name = _mask_name(sample.id, s_idx)
            pgmio.write_pgm(out / name, np.where(mask, 255, 0).astype(np.uint8))
            mask_names.append(name)
        entries.append(
            {
                "id": sample.id,
                "split": sample.split,
                "image": _image_name(sample.id),
                "report": _report_name(sample.id),
                "masks": mask_names,
                "category": sample.category,
                "lesions": [dataclasses.asdict(lesion) for lesion in sample.lesions],
            }
        )
    manifest = {
        "format": 1,
        "spec": dataclasses.asdict(spec),
        "vocab": VOCAB_NAME,
        "samples": entries,
    }
    (out / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_dataset(
    directory: str | Path,
) -> tuple[list[SynthSample], list[SynthSample], Vocab]:
    """Read a dataset written by :func:`write_dataset`."""
    root = Path(directory)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DataError(f"{root}: no {MANIFEST_NAME} found")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise DataError(f"{manifest_path}: invalid JSON: {err}") from err
    if manifest.get("format") != 1:
        raise DataError(f"{manifest_path}: unsupported manifest format")
    vocab = Vocab.load(root / manifest["vocab"])

    train: list[SynthSample] = []
    test: list[SynthSample] = []
    for entry in manifest["samples"]:
        try:
            sample_id = int(entry["id"])
            split = entry["split"]
            image_path = root / entry["image"]
            if not image_path.is_file():
                raise DataError(f"sample {sample_id}: missing image {entry['image']}")
            image = ImageSample.from_pgm(image_path)
            report = (root / entry["report"]).read_text(encoding="utf-8").strip()
            masks = []
            for name in entry["masks"]:
                mask_path = root / name
                if not mask_path.is_file():
                    raise DataError(f"sample {sample_id}: missing mask {name}")
                masks.append(pgmio.read_pgm(mask_path) > 127)
            lesions = [Lesion(**lesion) for lesion in entry["lesions"]]
        except (KeyError, TypeError) as err:
            raise DataError(f"{manifest_path}: malformed sample entry: {err}") from err
        sample = SynthSample(
            id=sample_id,
            split=split,
            image=image,
            report=report,
            masks=masks,
            lesions=lesions,
        )
        if split == "train":
            train.append(sample)
        elif split == "test":
            test.append(sample)
        else:
            raise DataError(f"sample {sample_id}: unknown split {split!r}")
    return train, test, vocab

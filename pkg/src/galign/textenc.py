"""Report text to a four-level embedding hierarchy.

A report is split into sentences, each sentence into words, and each word
into subword pieces by greedy longest-match against a vocabulary.  Pieces
are embedded through a lookup table followed by a small shared MLP; words
sum their pieces, sentences sum their words, and the report embedding is
the mean over sentence columns.  All stages are differentiable nodes so
gradients reach the embedding table and the MLP weights.
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Node
from .errors import ConfigError, ContractError, EmptyReportError

UNK = "<unk>"

_SENTENCE_END = re.compile(r"[.!?]+(?=\s|$)")


@dataclass(frozen=True)
class Vocab:
    """An ordered set of subword pieces; line number in a vocab file is id."""

    pieces: tuple[str, ...]
    piece_to_id: dict[str, int] = field(init=False, repr=False, compare=False)
    max_piece_len: int = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(set(self.pieces)) != len(self.pieces):
            raise ConfigError("vocab contains duplicate pieces")
        if UNK not in self.pieces:
            raise ConfigError(f"vocab must contain the {UNK!r} piece")
        if any(not p or any(c.isspace() for c in p) for p in self.pieces):
            raise ConfigError("vocab pieces must be non-empty and whitespace-free")
        object.__setattr__(
            self, "piece_to_id", {p: i for i, p in enumerate(self.pieces)}
        )
        object.__setattr__(
            self, "max_piece_len", max(len(p) for p in self.pieces)
        )

    def __len__(self) -> int:
        return len(self.pieces)

    @property
    def unk_id(self) -> int:
        return self.piece_to_id[UNK]

    @classmethod
    def build(cls, words: Iterable[str], alphabet: Iterable[str] | None = None) -> "Vocab":
        """Vocabulary from whole-word pieces plus single-character fallbacks.

        When ``alphabet`` is omitted it is derived from the characters of
        the given words.
        """
        word_set = {w.lower() for w in words if w}
        if alphabet is None:
            chars = {c for w in word_set for c in w}
        else:
            chars = {c.lower() for c in alphabet}
        singles = sorted(chars)
        multi = sorted(w for w in word_set if len(w) > 1 or w not in chars)
        ordered = [UNK] + singles + [w for w in multi if w not in chars]
        return cls(pieces=tuple(dict.fromkeys(ordered)))

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocab":
        words: set[str] = set()
        for text in texts:
            for raw in text.split():
                w = _clean_word(raw)
                if w:
                    words.add(w)
        if not words:
            raise EmptyReportError("no usable words found to build a vocabulary")
        return cls.build(words)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.pieces) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        pieces = tuple(line for line in lines if line)
        if not pieces:
            raise ConfigError(f"{path}: empty vocabulary file")
        return cls(pieces=pieces)


def _clean_word(raw: str) -> str:
    return raw.lower().strip(string.punctuation)


def split_sentences(report: str) -> list[str]:
    """Split on sentence terminators (./!/?) followed by whitespace or end.

    Terminators are dropped, fragments are trimmed, and empty fragments
    are discarded.  A report without any alphabetic content raises
    :class:`EmptyReportError`.
    """
    if not any(c.isalpha() for c in report):
        raise EmptyReportError("report has no alphabetic content")
    fragments = _SENTENCE_END.split(report)
    sentences = [f.strip() for f in fragments]
    return [s for s in sentences if s]


def tokenize(sentence: str, vocab: Vocab) -> list[list[int]]:
    """Piece ids per word: lowercase, strip punctuation, greedy longest match.

    Characters with no piece of their own map to the ``<unk>`` id, so
    tokenization never fails on any input word.
    """
    per_word: list[list[int]] = []
    for raw in sentence.split():
        word = _clean_word(raw)
        if not word:
            continue
        ids: list[int] = []
        pos = 0
        while pos < len(word):
            matched = False
            longest = min(vocab.max_piece_len, len(word) - pos)
            for length in range(longest, 0, -1):
                piece = word[pos : pos + length]
                pid = vocab.piece_to_id.get(piece)
                if pid is not None:
                    ids.append(pid)
                    pos += length
                    matched = True
                    break
            if not matched:
                ids.append(vocab.unk_id)
                pos += 1
        per_word.append(ids)
    return per_word


@dataclass
class TokenizedReport:
    """Flat piece ids plus word and sentence group sizes.

    ``word_boundaries[j]`` is the number of pieces in word ``j`` and
    ``sentence_boundaries[i]`` the number of words in sentence ``i``.
    """

    piece_ids: list[int]
    word_boundaries: list[int]
    sentence_boundaries: list[int]

    def __post_init__(self) -> None:
        if not self.sentence_boundaries:
            raise ContractError("TokenizedReport: need at least one sentence")
        if any(n < 1 for n in self.word_boundaries) or any(
            n < 1 for n in self.sentence_boundaries
        ):
            raise ContractError("TokenizedReport: all group sizes must be >= 1")
        if sum(self.word_boundaries) != len(self.piece_ids):
            raise ContractError(
                "TokenizedReport: word boundaries do not cover the piece ids"
            )
        if sum(self.sentence_boundaries) != len(self.word_boundaries):
            raise ContractError(
                "TokenizedReport: sentence boundaries do not cover the words"
            )

    @property
    def n_pieces(self) -> int:
        return len(self.piece_ids)

    @property
    def n_words(self) -> int:
        return len(self.word_boundaries)

    @property
    def n_sentences(self) -> int:
        return len(self.sentence_boundaries)


def tokenize_report(report: str, vocab: Vocab) -> TokenizedReport:
    """Sentence split plus tokenization, assembled into one flat record.

    Sentences that yield no words (punctuation-only fragments) are
    dropped; if none survive the report is unusable.
    """
    piece_ids: list[int] = []
    word_boundaries: list[int] = []
    sentence_boundaries: list[int] = []
    for sentence in split_sentences(report):
        words = tokenize(sentence, vocab)
        if not words:
            continue
        for ids in words:
            piece_ids.extend(ids)
            word_boundaries.append(len(ids))
        sentence_boundaries.append(len(words))
    if not sentence_boundaries:
        raise EmptyReportError("report contains no tokenizable sentences")
    return TokenizedReport(piece_ids, word_boundaries, sentence_boundaries)


@dataclass
class TextParams:
    """Trainable text-side tensors: the piece table and the shared MLP."""

    table: Node  # (|vocab|, D) rows are piece embeddings
    w1: Node  # (hidden, D)
    b1: Node  # (hidden, 1)
    w2: Node  # (D, hidden)
    b2: Node  # (D, 1)

    @property
    def dim(self) -> int:
        return self.table.shape[1]


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def init_text_params(
    seed: int,
    vocab_size: int,
    dim: int = 48,
    hidden: int = 48,
    table_scale: float = 3e-3,
) -> TextParams:
    """Seeded init: uniform table at ``table_scale``, Glorot MLP weights.

    The output bias ``b2`` is drawn uniform at the table scale so a word
    whose hidden units are all ReLU-dead still maps to a nonzero feature;
    the hidden bias stays zero.
    """
    if vocab_size < 1 or dim < 1 or hidden < 1:
        raise ConfigError(
            f"init_text_params: sizes must be positive, got vocab={vocab_size},"
            f" dim={dim}, hidden={hidden}"
        )
    if table_scale <= 0:
        raise ConfigError(f"init_text_params: table_scale must be > 0, got {table_scale}")
    rng = np.random.default_rng(seed)
    table = rng.uniform(-table_scale, table_scale, size=(vocab_size, dim))
    return TextParams(
        table=dm.parameter(table),
        w1=dm.parameter(glorot_uniform(rng, hidden, dim)),
        b1=dm.parameter(np.zeros((hidden, 1))),
        w2=dm.parameter(glorot_uniform(rng, dim, hidden)),
        b2=dm.parameter(rng.uniform(-table_scale, table_scale, size=(dim, 1))),
    )


@dataclass
class TextEmbeddings:
    """Columns are embeddings: pieces (D, N), words (D, Q), sentences (D, P),
    and the report mean (D, 1)."""

    pieces: Node
    words: Node
    sentences: Node
    report: Node

    @property
    def dim(self) -> int:
        return self.pieces.shape[0]


def _sum_column_groups(matrix: Node, group_sizes: Sequence[int]) -> Node:
    """Sum adjacent column groups; group ``j`` covers ``group_sizes[j]`` columns."""
    rows = dm.transpose(matrix)
    cols: list[Node] = []
    start = 0
    for size in group_sizes:
        segment = dm.gather_rows(rows, range(start, start + size))
        cols.append(dm.transpose(dm.sum_axis(segment, axis=0, keepdims=True)))
        start += size
    return dm.concat_cols(cols)


def embed_report(tok: TokenizedReport, params: TextParams) -> TextEmbeddings:
    """Run the hierarchy: gather pieces, MLP, then sum/sum/mean upward."""
    gathered = dm.gather_rows(params.table, tok.piece_ids)  # (N, D)
    x = dm.transpose(gathered)  # (D, N)
    h = dm.relu(dm.add(dm.matmul(params.w1, x), params.b1))
    pieces = dm.add(dm.matmul(params.w2, h), params.b2)  # (D, N)
    words = _sum_column_groups(pieces, tok.word_boundaries)  # (D, Q)
    sentences = _sum_column_groups(words, tok.sentence_boundaries)  # (D, P)
    report = dm.mean_axis(sentences, axis=1, keepdims=True)  # (D, 1)
    return TextEmbeddings(pieces=pieces, words=words, sentences=sentences, report=report)

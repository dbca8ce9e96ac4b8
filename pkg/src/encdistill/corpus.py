"""Word-level toy tokenizer, vocabulary, MLM masking and padded batches."""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .encoder import ConfigError
from .seeding import derive_seed, make_rng

BOS, PAD, MASK, UNK = "<s>", "<pad>", "<mask>", "<unk>"
SPECIAL_TOKENS = (BOS, PAD, MASK, UNK)
BOS_ID, PAD_ID, MASK_ID, UNK_ID = range(4)
NUM_SPECIAL = len(SPECIAL_TOKENS)
IGNORE_INDEX = -100

# replacement categories recorded per position by apply_masking
KEEP_UNMASKED, REPLACED_MASK, REPLACED_RANDOM, REPLACED_KEEP = range(4)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[:NUM_SPECIAL] != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def encode(self, text: str) -> list[int]:
        return [self.id_of(t) for t in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def detokenize(self, ids: Iterable[int]) -> str:
        return " ".join(self.decode(ids))

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


def build_vocab(corpus: str | Iterable[str], max_size: int) -> Vocabulary:
    """Most frequent ``max_size - 4`` tokens, ties broken lexicographically."""
    if max_size < NUM_SPECIAL + 1:
        raise ValueError(f"max_size must be >= {NUM_SPECIAL + 1}")
    lines = corpus.splitlines() if isinstance(corpus, str) else corpus
    counts = Counter()
    for line in lines:
        counts.update(tokenize(line))
    for special in SPECIAL_TOKENS:
        counts.pop(special, None)
    if not counts:
        raise ValueError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: max_size - NUM_SPECIAL]]
    return Vocabulary(SPECIAL_TOKENS + tuple(kept))


@dataclass
class MaskedBatch:
    token_ids: np.ndarray      # [B, n] model input after masking
    labels: np.ndarray         # [B, n] original id at masked positions, IGNORE_INDEX elsewhere
    mask: np.ndarray           # [B, n] True at masked positions
    valid: np.ndarray          # [B, n] True at real (non-padding) positions
    lengths: np.ndarray        # [B]
    replacement: np.ndarray    # [B, n] replacement category per position

    @property
    def mask_sets(self) -> list[np.ndarray]:
        return [np.flatnonzero(row) for row in self.mask]

    @property
    def original_ids(self) -> np.ndarray:
        return self.labels[self.mask]

    @property
    def masked_count(self) -> int:
        return int(self.mask.sum())

    @property
    def token_count(self) -> int:
        return int(self.valid.sum())

    @property
    def empty(self) -> bool:
        return self.masked_count == 0

    @property
    def clean_ids(self) -> np.ndarray:
        """Input ids with masked positions restored."""
        return np.where(self.mask, self.labels, self.token_ids)


def pad_sequences(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    ids = np.full((len(seqs), int(lengths.max())), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, lengths


def apply_masking(token_ids, rate: float, seed: int | np.random.Generator, vocab_size: int,
                  valid=None, split: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> MaskedBatch:
    """Select eligible positions with probability ``rate``; replace per ``split``.

    Position 0 (``<s>``) and padding are never eligible. Random
    replacements are drawn from the non-reserved ids.
    """
    if not 0 <= rate < 1:
        raise ValueError("mask rate must lie in [0, 1)")
    if abs(sum(split) - 1) > 1e-9 or min(split) < 0:
        raise ValueError("replacement split must be three non-negative fractions summing to 1")
    ids = np.atleast_2d(np.asarray(token_ids, dtype=np.int64))
    valid = ids != PAD_ID if valid is None else np.atleast_2d(np.asarray(valid, dtype=bool))
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    eligible = valid.copy()
    eligible[:, 0] = False
    selected = (rng.random(ids.shape) < rate) & eligible
    kind = rng.random(ids.shape)
    random_ids = rng.integers(NUM_SPECIAL, max(vocab_size, NUM_SPECIAL + 1), size=ids.shape)

    to_mask = selected & (kind < split[0])
    to_random = selected & (kind >= split[0]) & (kind < split[0] + split[1])
    to_keep = selected & ~to_mask & ~to_random

    out = ids.copy()
    out[to_mask] = MASK_ID
    out[to_random] = random_ids[to_random]
    labels = np.where(selected, ids, IGNORE_INDEX)
    replacement = np.zeros(ids.shape, dtype=np.int8)
    replacement[to_mask] = REPLACED_MASK
    replacement[to_random] = REPLACED_RANDOM
    replacement[to_keep] = REPLACED_KEEP
    return MaskedBatch(out, labels, selected, valid, valid.sum(axis=1), replacement)


def read_corpus(path) -> list[str]:
    """One document per line; blank lines dropped."""
    text = Path(path).read_text(encoding="utf-8")
    return [line for line in text.splitlines() if line.strip()]


def encode_documents(lines: Iterable[str], vocab: Vocabulary, n_max: int) -> list[list[int]]:
    seqs = []
    for line in lines:
        ids = vocab.encode(line)
        if ids:
            seqs.append([BOS_ID] + ids[: n_max - 1])
    return seqs


def make_batches(corpus: Sequence[str], vocab: Vocabulary, batch_size: int, n_max: int = 64,
                 seed: int = 0, max_positions: int | None = None, mask_rate: float = 0.15,
                 epoch: int = 0) -> Iterator[MaskedBatch]:
    """One shuffled epoch of masked, padded batches.

    Order and masks depend only on ``(seed, epoch)``.
    """
    if max_positions is not None and n_max > max_positions:
        raise ConfigError(f"n_max {n_max} exceeds max_positions {max_positions}")
    if batch_size < 1 or n_max < 2:
        raise ConfigError("batch_size must be >= 1 and n_max >= 2")
    seqs = encode_documents(corpus, vocab, n_max)
    if not seqs:
        raise ValueError("corpus yields no sequences")
    rng = make_rng(derive_seed(seed, 1, epoch))
    order = rng.permutation(len(seqs))
    for b, start in enumerate(range(0, len(order), batch_size)):
        chunk = [seqs[i] for i in order[start:start + batch_size]]
        ids, _ = pad_sequences(chunk)
        yield apply_masking(ids, mask_rate, derive_seed(seed, 2, epoch, b), len(vocab),
                            valid=ids != PAD_ID)


def batch_stream(corpus: Sequence[str], vocab: Vocabulary, batch_size: int, n_max: int = 64,
                 seed: int = 0, max_positions: int | None = None,
                 mask_rate: float = 0.15) -> Iterator[MaskedBatch]:
    """Endless stream of epochs; batches with no masked position are skipped."""
    epoch = 0
    while True:
        for batch in make_batches(corpus, vocab, batch_size, n_max, seed, max_positions,
                                  mask_rate, epoch):
            if not batch.empty:
                yield batch
        epoch += 1

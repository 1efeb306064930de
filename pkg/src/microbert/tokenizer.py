"""Uncased, NFD-normalizing WordPiece tokenizer.

Training builds the inventory bottom-up: every observed character enters the
vocabulary in both word-initial and continuation (``##``) form, then adjacent
piece pairs are merged greedily by corpus frequency until the budget is
spent.  Encoding is greedy longest-prefix match with whole-word ``[UNK]``
fallback.
"""

from __future__ import annotations

import heapq
import logging
import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
CONTINUATION = "##"

MIN_VOCAB_SIZE = 8000
MAX_VOCAB_SIZE = 14000
SATURATION_TYPES = 200_000
MAX_CHARS_PER_WORD = 100


def normalize(text: str) -> str:
    """Canonical decomposition followed by lowercasing.

    Lowercasing can (rarely) produce precomposed characters, so the result is
    decomposed once more; this makes the function idempotent.
    """
    return unicodedata.normalize("NFD", unicodedata.normalize("NFD", text).lower())


def choose_vocab_size(unique_whitespace_tokens: int) -> int:
    """Vocabulary budget interpolated linearly from 8k (no types) to 14k (200k+ types)."""
    if unique_whitespace_tokens < 0:
        raise ValueError("token count must be non-negative")
    frac = min(1.0, unique_whitespace_tokens / SATURATION_TYPES)
    size = MIN_VOCAB_SIZE + round((MAX_VOCAB_SIZE - MIN_VOCAB_SIZE) * frac)
    return min(max(size, MIN_VOCAB_SIZE), MAX_VOCAB_SIZE)


class Vocabulary:
    """Immutable ordered wordpiece inventory; specials occupy ids 0-4."""

    def __init__(self, pieces: Sequence[str]):
        pieces = list(pieces)
        if tuple(pieces[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")
        index: dict[str, int] = {}
        for i, piece in enumerate(pieces):
            if not piece:
                raise ValueError(f"empty piece at line {i + 1}")
            if piece in index:
                raise ValueError(f"duplicate piece {piece!r} at line {i + 1}")
            index[piece] = i
        self._pieces = tuple(pieces)
        self._index = index
        self._cache: dict[str, tuple[int, ...]] = {}

    def __len__(self) -> int:
        return len(self._pieces)

    def __contains__(self, piece: str) -> bool:
        return piece in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._pieces == other._pieces

    def __hash__(self) -> int:
        return hash(self._pieces)

    @property
    def pieces(self) -> tuple[str, ...]:
        return self._pieces

    def id_of(self, piece: str) -> int:
        return self._index.get(piece, UNK_ID)

    def piece_of(self, idx: int) -> str:
        return self._pieces[idx]

    @property
    def first_regular_id(self) -> int:
        return len(SPECIAL_TOKENS)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self._pieces) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)

    def segment(self, normalized_word: str) -> tuple[int, ...]:
        """Greedy longest-prefix segmentation of one already-normalized word."""
        cached = self._cache.get(normalized_word)
        if cached is not None:
            return cached
        ids = self._segment(normalized_word)
        if len(self._cache) < 500_000:
            self._cache[normalized_word] = ids
        return ids

    def _segment(self, word: str) -> tuple[int, ...]:
        if not word or len(word) > MAX_CHARS_PER_WORD:
            return (UNK_ID,)
        out = []
        start = 0
        while start < len(word):
            end = len(word)
            found = None
            while start < end:
                sub = word[start:end]
                if start > 0:
                    sub = CONTINUATION + sub
                idx = self._index.get(sub)
                if idx is not None and idx >= len(SPECIAL_TOKENS):
                    found = idx
                    break
                end -= 1
            if found is None:
                return (UNK_ID,)
            out.append(found)
            start = end
        return tuple(out)


@dataclass
class EncodedSentence:
    """A word sequence, its wordpiece ids, and the word-to-piece boundary map.

    ``spans[i] = (start, end)`` indexes ``ids`` (end exclusive).  When
    ``add_specials`` was used, ``ids[0]`` is ``[CLS]`` and ``ids[-1]`` is
    ``[SEP]``; spans never cover them.
    """

    words: tuple[str, ...]
    normalized: tuple[str, ...]
    ids: np.ndarray
    spans: np.ndarray
    has_specials: bool = True
    xpos: Optional[tuple[str, ...]] = None
    heads: Optional[tuple[int, ...]] = None
    deprels: Optional[tuple[str, ...]] = None
    ner: Optional[tuple[str, ...]] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.words)
        for name in ("xpos", "heads", "deprels", "ner"):
            layer = getattr(self, name)
            if layer is not None and len(layer) != n:
                raise ValueError(f"{name} layer has {len(layer)} entries for {n} words")

    @property
    def n_words(self) -> int:
        return len(self.words)

    @property
    def n_pieces(self) -> int:
        """Number of non-special wordpieces."""
        return len(self.ids) - (2 if self.has_specials else 0)

    def __len__(self) -> int:
        return len(self.ids)

    def pieces_of(self, word_index: int) -> np.ndarray:
        start, end = self.spans[word_index]
        return self.ids[start:end]

    def slice_words(self, start: int, end: int) -> "EncodedSentence":
        """Sub-sentence over words[start:end], re-wrapped with specials if present."""
        offset = 1 if self.has_specials else 0
        p0 = int(self.spans[start, 0])
        p1 = int(self.spans[end - 1, 1])
        body = self.ids[p0:p1]
        if self.has_specials:
            ids = np.concatenate([[CLS_ID], body, [SEP_ID]]).astype(self.ids.dtype)
        else:
            ids = body.copy()
        spans = self.spans[start:end] - p0 + offset

        def cut(layer):
            return None if layer is None else tuple(layer[start:end])

        return replace(
            self,
            words=self.words[start:end],
            normalized=self.normalized[start:end],
            ids=ids,
            spans=spans,
            xpos=cut(self.xpos),
            heads=cut(self.heads),
            deprels=cut(self.deprels),
            ner=cut(self.ner),
            meta=dict(self.meta),
        )


def encode(
    words: Sequence[str],
    vocab: Vocabulary,
    add_specials: bool = True,
    xpos: Optional[Sequence[str]] = None,
    heads: Optional[Sequence[int]] = None,
    deprels: Optional[Sequence[str]] = None,
    ner: Optional[Sequence[str]] = None,
) -> EncodedSentence:
    """Segment each word and record its contiguous piece range."""
    normalized = tuple(normalize(w) for w in words)
    ids: list[int] = [vocab.id_of(CLS)] if add_specials else []
    spans = np.zeros((len(words), 2), dtype=np.int64)
    for i, word in enumerate(normalized):
        pieces = vocab.segment(word)
        spans[i] = (len(ids), len(ids) + len(pieces))
        ids.extend(pieces)
    if add_specials:
        ids.append(vocab.id_of(SEP))
    return EncodedSentence(
        words=tuple(words),
        normalized=normalized,
        ids=np.asarray(ids, dtype=np.int64),
        spans=spans,
        has_specials=add_specials,
        xpos=None if xpos is None else tuple(xpos),
        heads=None if heads is None else tuple(int(h) for h in heads),
        deprels=None if deprels is None else tuple(deprels),
        ner=None if ner is None else tuple(ner),
    )


def decode_word(vocab: Vocabulary, ids: Iterable[int]) -> str:
    """Join pieces, stripping continuation markers."""
    parts = []
    for i in ids:
        piece = vocab.piece_of(int(i))
        parts.append(piece[len(CONTINUATION):] if piece.startswith(CONTINUATION) else piece)
    return "".join(parts)


def _merge_pieces(left: str, right: str) -> str:
    return left + right[len(CONTINUATION):]


def train_wordpiece(
    corpus: Iterable[str],
    vocab_size: int,
    seed: int = 0,
    min_frequency: int = 2,
    max_types: Optional[int] = None,
) -> Vocabulary:
    """Learn a WordPiece inventory from a stream of words.

    Words are normalized before counting.  Merges are chosen by pair
    frequency (ties broken lexicographically) and stop when the vocabulary
    reaches ``vocab_size`` or no pair occurs ``min_frequency`` times.  When
    ``max_types`` is set and the corpus has more word types, a seeded
    frequency-preserving sample of types is used.
    """
    counts = Counter(normalize(w) for w in corpus)
    counts.pop("", None)
    if not counts:
        raise ValueError("cannot train a tokenizer on an empty corpus")
    types = sorted(counts)
    if max_types is not None and len(types) > max_types:
        rng = np.random.default_rng(seed)
        keep = rng.choice(len(types), size=max_types, replace=False)
        types = sorted(types[i] for i in keep)

    alphabet = sorted({ch for word in types for ch in word})
    base = list(SPECIAL_TOKENS)
    for ch in alphabet:
        base.append(ch)
        base.append(CONTINUATION + ch)
    if vocab_size < len(base):
        logger.warning(
            "vocab_size %d is below specials+alphabet (%d); returning alphabet-only vocabulary",
            vocab_size, len(base),
        )
        return Vocabulary(base)

    pieces_list = list(base)
    known = set(base)
    words: list[list[str]] = []
    freqs: list[int] = []
    for w in types:
        if len(w) > MAX_CHARS_PER_WORD:
            continue
        words.append([w[0]] + [CONTINUATION + c for c in w[1:]])
        freqs.append(counts[w])

    pair_counts: dict[tuple[str, str], int] = defaultdict(int)
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, pcs in enumerate(words):
        for pair in zip(pcs, pcs[1:]):
            pair_counts[pair] += freqs[wi]
            where[pair].add(wi)

    heap = [(-c, pair) for pair, c in pair_counts.items()]
    heapq.heapify(heap)

    while len(pieces_list) < vocab_size and heap:
        neg, pair = heapq.heappop(heap)
        current = pair_counts.get(pair, 0)
        if current != -neg or current == 0:
            continue
        if current < min_frequency:
            break
        left, right = pair
        merged = _merge_pieces(left, right)
        if merged not in known:
            known.add(merged)
            pieces_list.append(merged)
        touched: set[tuple[str, str]] = set()
        for wi in sorted(where.pop(pair, ())):
            pcs = words[wi]
            f = freqs[wi]
            for old in zip(pcs, pcs[1:]):
                pair_counts[old] -= f
                touched.add(old)
            new = []
            i = 0
            while i < len(pcs):
                if i + 1 < len(pcs) and pcs[i] == left and pcs[i + 1] == right:
                    new.append(merged)
                    i += 2
                else:
                    new.append(pcs[i])
                    i += 1
            words[wi] = new
            for old in zip(pcs, pcs[1:]):
                where[old].discard(wi)
            for p in zip(new, new[1:]):
                pair_counts[p] += f
                where[p].add(wi)
                touched.add(p)
        for p in touched:
            c = pair_counts.get(p, 0)
            if c <= 0:
                pair_counts.pop(p, None)
                where.pop(p, None)
            else:
                heapq.heappush(heap, (-c, p))
    return Vocabulary(pieces_list)


def count_unique_tokens(words: Iterable[str]) -> int:
    return len({normalize(w) for w in words})

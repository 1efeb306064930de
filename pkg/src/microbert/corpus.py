"""Readers, splits and tag-scheme conversion for the three data kinds.

* UD treebanks in CoNLL-U (form, XPOS, head, deprel are kept).
* WikiAnn NER files: ``token<TAB or space>tag`` lines, blank line between
  sentences, IOB1 tags converted to BIOUL on read.
* Unlabeled text: one pre-tokenized sentence per line, tokens separated by
  spaces, a blank line between documents.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, TypeVar

import numpy as np

from .tokenizer import EncodedSentence

logger = logging.getLogger(__name__)

T = TypeVar("T")

ID, FORM, LEMMA, UPOS, XPOS, FEATS, HEAD, DEPREL, DEPS, MISC = range(10)


class DataError(ValueError):
    """Malformed or inconsistent input data; the message names the location."""


# ---------------------------------------------------------------------------
# treebanks
# ---------------------------------------------------------------------------


@dataclass
class TreebankSentence:
    words: tuple[str, ...]
    xpos: tuple[str, ...]
    heads: tuple[int, ...]
    deprels: tuple[str, ...]
    sent_id: Optional[str] = None

    def __len__(self) -> int:
        return len(self.words)


@dataclass
class Treebank:
    sentences: list[TreebankSentence]
    xpos_inventory: list[str] = field(default_factory=list)
    deprel_inventory: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.xpos_inventory:
            self.xpos_inventory = sorted({t for s in self.sentences for t in s.xpos})
        if not self.deprel_inventory:
            self.deprel_inventory = sorted({r for s in self.sentences for r in s.deprels})

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self) -> Iterator[TreebankSentence]:
        return iter(self.sentences)

    @property
    def n_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)


def _finish_sentence(rows, comments, path, first_line) -> TreebankSentence:
    sent_id = None
    for c in comments:
        body = c[1:].strip()
        if body.startswith("sent_id") and "=" in body:
            sent_id = body.split("=", 1)[1].strip()
    label = sent_id or f"starting at line {first_line}"
    n = len(rows)
    words, xpos, heads, deprels = [], [], [], []
    for expected, (lineno, cols) in enumerate(rows, start=1):
        try:
            token_id = int(cols[ID])
        except ValueError:
            raise DataError(f"{path}:{lineno}: invalid token id {cols[ID]!r}") from None
        if token_id != expected:
            raise DataError(f"{path}:{lineno}: token id {token_id}, expected {expected} (sentence {label})")
        try:
            head = int(cols[HEAD])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-integer head {cols[HEAD]!r}") from None
        if not 0 <= head <= n:
            raise DataError(f"{path}:{lineno}: head {head} out of range for {n}-word sentence {label}")
        if head == token_id:
            raise DataError(f"{path}:{lineno}: token {token_id} is its own head (sentence {label})")
        words.append(cols[FORM])
        xpos.append(cols[XPOS])
        heads.append(head)
        deprels.append(cols[DEPREL])
    if heads.count(0) != 1:
        logger.warning("%s: sentence %s has %d root attachments", path, label, heads.count(0))
    return TreebankSentence(tuple(words), tuple(xpos), tuple(heads), tuple(deprels), sent_id)


def iter_conllu(path) -> Iterator[TreebankSentence]:
    """Yield sentences from a CoNLL-U file, dropping multiword-range and empty nodes."""
    path = Path(path)
    rows: list[tuple[int, list[str]]] = []
    comments: list[str] = []
    first_line = 1
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                if rows:
                    yield _finish_sentence(rows, comments, path, first_line)
                rows, comments = [], []
                first_line = lineno + 1
                continue
            if line.startswith("#"):
                if not rows:
                    comments.append(line)
                continue
            cols = line.split("\t")
            if len(cols) != 10:
                raise DataError(f"{path}:{lineno}: expected 10 tab-separated columns, found {len(cols)}")
            if "-" in cols[ID] or "." in cols[ID]:
                continue
            rows.append((lineno, cols))
    if rows:
        yield _finish_sentence(rows, comments, path, first_line)


def read_conllu(path) -> Treebank:
    return Treebank(list(iter_conllu(path)))


def write_conllu(sentences: Iterable[TreebankSentence], path) -> None:
    """Write kept fields back out; unkept columns become ``_``."""
    lines = []
    for sent in sentences:
        if sent.sent_id is not None:
            lines.append(f"# sent_id = {sent.sent_id}")
        for i, (w, x, h, r) in enumerate(zip(sent.words, sent.xpos, sent.heads, sent.deprels), start=1):
            lines.append("\t".join([str(i), w, "_", "_", x, "_", str(h), r, "_", "_"]))
        lines.append("")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


# ---------------------------------------------------------------------------
# tag schemes
# ---------------------------------------------------------------------------


def _split_tag(tag: str, allowed: str) -> tuple[str, Optional[str]]:
    if tag == "O":
        return "O", None
    if len(tag) < 3 or tag[1] != "-" or tag[0] not in allowed:
        raise DataError(f"unknown tag {tag!r}")
    return tag[0], tag[2:]


def iob1_spans(tags: Sequence[str]) -> list[tuple[int, int, str]]:
    """Chunks of an IOB1 sequence as (start, end_inclusive, type)."""
    spans = []
    start = None
    kind = None
    for i, tag in enumerate(tags):
        prefix, typ = _split_tag(tag, "IB")
        if prefix == "O":
            if start is not None:
                spans.append((start, i - 1, kind))
            start = kind = None
        elif prefix == "B" or start is None or typ != kind:
            if start is not None:
                spans.append((start, i - 1, kind))
            start, kind = i, typ
    if start is not None:
        spans.append((start, len(tags) - 1, kind))
    return spans


def spans_to_bioul(spans: Iterable[tuple[int, int, str]], length: int) -> list[str]:
    tags = ["O"] * length
    for start, end, typ in spans:
        if start == end:
            tags[start] = f"U-{typ}"
        else:
            tags[start] = f"B-{typ}"
            for i in range(start + 1, end):
                tags[i] = f"I-{typ}"
            tags[end] = f"L-{typ}"
    return tags


def spans_to_iob1(spans: Iterable[tuple[int, int, str]], length: int) -> list[str]:
    """IOB1 writer: chunks are ``I-`` runs, ``B-`` only where a chunk touches a same-type one."""
    tags = ["O"] * length
    for start, end, typ in sorted(spans):
        touching = start > 0 and tags[start - 1][2:] == typ
        prefix = "B" if touching else "I"
        tags[start] = f"{prefix}-{typ}"
        for i in range(start + 1, end + 1):
            tags[i] = f"I-{typ}"
    return tags


def iob1_to_bioul(tags: Sequence[str]) -> list[str]:
    """Convert IOB1 (``B-`` only separates touching same-type chunks) to BIOUL."""
    return spans_to_bioul(iob1_spans(tags), len(tags))


def bioul_spans(tags: Sequence[str]) -> list[tuple[int, int, str]]:
    """Spans of a BIOUL sequence as (start, end_inclusive, type).

    Malformed input is repaired rather than rejected: an ``I-``/``L-`` that
    does not continue an open chunk of its type opens one (as ``B-``/``U-``
    would), and a chunk left open by ``O``, a type change or the sequence
    end is closed at its last token.
    """
    spans = []
    start = None
    kind = None
    for i, tag in enumerate(tags):
        prefix, typ = _split_tag(tag, "BIOUL")
        if prefix == "O":
            if start is not None:
                spans.append((start, i - 1, kind))
            start = kind = None
            continue
        continues = start is not None and typ == kind and prefix in "IL"
        if not continues:
            if start is not None:
                spans.append((start, i - 1, kind))
            start, kind = i, typ
        if prefix in "UL":
            spans.append((start, i, kind))
            start = kind = None
    if start is not None:
        spans.append((start, len(tags) - 1, kind))
    return spans


def is_valid_bioul(tags: Sequence[str]) -> bool:
    prev = "O"
    prev_type = None
    for tag in tags:
        try:
            prefix, typ = _split_tag(tag, "BIOUL")
        except DataError:
            return False
        inside = prev in "BI"
        if prefix in "IL":
            if not inside or typ != prev_type:
                return False
        elif inside:
            return False
        prev, prev_type = prefix, typ
    return prev not in "BI"


# ---------------------------------------------------------------------------
# NER data
# ---------------------------------------------------------------------------


@dataclass
class NerSentence:
    words: tuple[str, ...]
    tags: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.words)


@dataclass
class NerDataset:
    train: list[NerSentence]
    dev: list[NerSentence]
    test: list[NerSentence]

    @property
    def tag_inventory(self) -> list[str]:
        types = sorted({t[2:] for s in self.train + self.dev + self.test for t in s.tags if t != "O"})
        return ["O"] + [f"{p}-{t}" for t in types for p in "BILU"]


def read_wikiann(path, scheme: str = "iob1") -> list[NerSentence]:
    """Read two-column token/tag lines; tags are returned in BIOUL."""
    path = Path(path)
    sentences = []
    words: list[str] = []
    tags: list[str] = []

    def flush(lineno):
        if not words:
            return
        try:
            converted = iob1_to_bioul(tags) if scheme == "iob1" else list(tags)
            if scheme == "bioul" and not is_valid_bioul(converted):
                raise DataError("invalid BIOUL sequence")
        except DataError as exc:
            raise DataError(f"{path}: sentence ending at line {lineno}: {exc}") from None
        sentences.append(NerSentence(tuple(words), tuple(converted)))

    with path.open(encoding="utf-8") as fh:
        lineno = 0
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                flush(lineno)
                words, tags = [], []
                continue
            cols = line.split("\t") if "\t" in line else line.split()
            if len(cols) < 2:
                raise DataError(f"{path}:{lineno}: expected token and tag, found {line!r}")
            token, tag = cols[0], cols[-1]
            words.append(token)
            tags.append(tag)
        flush(lineno + 1)
    return sentences


def write_ner(sentences: Iterable[NerSentence], path) -> None:
    lines = []
    for s in sentences:
        lines.extend(f"{w}\t{t}" for w, t in zip(s.words, s.tags))
        lines.append("")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def split_sizes(n: int, ratios: Sequence[int]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items to integer ratios."""
    total = sum(ratios)
    exact = [n * r / total for r in ratios]
    sizes = [int(np.floor(x)) for x in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_dataset(
    items: Sequence[T],
    ratios: Sequence[int] = (8, 1, 1),
    seed: int = 0,
) -> tuple[list[T], ...]:
    """Seeded shuffle, then cut into consecutive parts sized by ``ratios``."""
    if len(items) < 10:
        raise DataError(f"need at least 10 sentences to split, got {len(items)}")
    if any(r <= 0 for r in ratios):
        raise ValueError("split ratios must be positive")
    order = np.random.default_rng(seed).permutation(len(items))
    sizes = split_sizes(len(items), ratios)
    parts = []
    start = 0
    for size in sizes:
        parts.append([items[i] for i in order[start:start + size]])
        start += size
    return tuple(parts)


# ---------------------------------------------------------------------------
# unlabeled text
# ---------------------------------------------------------------------------


@dataclass
class UnlabeledCorpus:
    """Documents of tokenized sentences with a train/validation split."""

    train: list[list[list[str]]]
    validation: list[list[list[str]]]

    def train_sentences(self) -> list[list[str]]:
        return [s for doc in self.train for s in doc]

    def validation_sentences(self) -> list[list[str]]:
        return [s for doc in self.validation for s in doc]

    @property
    def n_tokens(self) -> int:
        return sum(len(s) for doc in self.train + self.validation for s in doc)


def read_documents(path) -> list[list[list[str]]]:
    """Read the unlabeled format: sentences per line, blank-line document breaks."""
    docs: list[list[list[str]]] = []
    current: list[list[str]] = []
    with Path(path).open(encoding="utf-8") as fh:
        for raw in fh:
            tokens = raw.split()
            if not tokens:
                if current:
                    docs.append(current)
                current = []
                continue
            current.append(tokens)
    if current:
        docs.append(current)
    return docs


def split_documents(
    docs: Sequence[list[list[str]]],
    validation_fraction: float = 0.1,
    seed: int = 0,
) -> UnlabeledCorpus:
    """Hold out about ``validation_fraction`` of documents (at least one)."""
    if len(docs) < 2:
        raise DataError(f"need at least 2 documents for a validation split, got {len(docs)}")
    order = np.random.default_rng(seed).permutation(len(docs))
    n_val = min(len(docs) - 1, max(1, int(round(validation_fraction * len(docs)))))
    val_idx = set(order[:n_val].tolist())
    train = [docs[i] for i in range(len(docs)) if i not in val_idx]
    validation = [docs[i] for i in range(len(docs)) if i in val_idx]
    return UnlabeledCorpus(train, validation)


def read_unlabeled(path, validation_fraction: float = 0.1, seed: int = 0) -> UnlabeledCorpus:
    return split_documents(read_documents(path), validation_fraction, seed)


# ---------------------------------------------------------------------------
# chunking
# ---------------------------------------------------------------------------


def _describe(sentence: EncodedSentence) -> str:
    sid = sentence.meta.get("sent_id") if sentence.meta else None
    head = " ".join(sentence.words[:8])
    return f"{sid!r} ({head!r}...)" if sid else f"{head!r}..."


def chunk_sequences(
    sentences: Iterable[EncodedSentence],
    max_wordpieces: int = 500,
    labeled: bool = False,
) -> Iterator[EncodedSentence]:
    """Split sentences with more than ``max_wordpieces`` non-special pieces.

    Chunks are packed greedily at word boundaries.  Labeled sentences are
    never split: an over-long one is an error.
    """
    for sent in sentences:
        if sent.n_pieces <= max_wordpieces:
            yield sent
            continue
        if labeled:
            raise DataError(
                f"labeled sentence {_describe(sent)} has {sent.n_pieces} wordpieces (limit {max_wordpieces})"
            )
        widths = sent.spans[:, 1] - sent.spans[:, 0]
        start = 0
        used = 0
        for i, w in enumerate(widths):
            if w > max_wordpieces:
                raise DataError(
                    f"word {sent.words[i]!r} in {_describe(sent)} has {w} wordpieces (limit {max_wordpieces})"
                )
            if used + w > max_wordpieces:
                yield sent.slice_words(start, i)
                start, used = i, 0
            used += w
        yield sent.slice_words(start, len(widths))

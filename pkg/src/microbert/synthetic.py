"""A small generated language with gold trees, tags and named entities.

Used for test fixtures and for desk-scale pretraining runs where no public
corpus is reachable.  The grammar is verb-final with postpositions, number
agreement between subject and verb, and multiword names of three entity
types, so that syntax carries real signal for masked-token prediction.

Run ``python -m microbert.synthetic OUT_DIR`` to write a fixture directory.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .corpus import NerSentence, Treebank, TreebankSentence, spans_to_bioul, spans_to_iob1, write_conllu

ONSETS = list("ptkbdgmnslrvzjh") + ["sh", "ch", "q"]
VOWELS = list("aeiouy")
ENTITY_TYPES = ("PER", "LOC", "ORG")
DETERMINERS = ("bu", "u", "bir", "har")
POSTPOSITIONS = ("bilan", "uchun", "dan", "gacha", "kabi")
PLURAL = "lar"
OBJECT_CASE = "ni"
VERB_TENSES = ("di", "ar", "moqda")


def _zipf(n: int) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1)
    return w / w.sum()


@dataclass
class GeneratedSentence:
    tree: TreebankSentence
    entities: list[tuple[int, int, str]]

    @property
    def words(self) -> tuple[str, ...]:
        return self.tree.words

    def ner(self, scheme: str = "bioul") -> NerSentence:
        n = len(self.tree.words)
        tags = spans_to_bioul(self.entities, n) if scheme == "bioul" else spans_to_iob1(self.entities, n)
        return NerSentence(self.tree.words, tuple(tags))


class SyntheticLanguage:
    def __init__(self, seed: int = 0, nouns: int = 400, verbs: int = 150, adjectives: int = 100,
                 adverbs: int = 40, names: int = 60):
        rng = np.random.default_rng([seed, 0x1A46])
        seen: set[str] = set()

        def stems(count, syllables):
            out = []
            while len(out) < count:
                k = int(rng.integers(syllables[0], syllables[1] + 1))
                stem = "".join(rng.choice(ONSETS) + rng.choice(VOWELS) for _ in range(k))
                if stem not in seen:
                    seen.add(stem)
                    out.append(stem)
            return out

        self.nouns = stems(nouns, (1, 3))
        self.verbs = stems(verbs, (1, 2))
        self.adjectives = [s + "li" for s in stems(adjectives, (1, 2))]
        self.adverbs = [s + "cha" for s in stems(adverbs, (1, 2))]
        self.names = {t: [s.capitalize() for s in stems(names, (2, 3))] for t in ENTITY_TYPES}
        self.org_suffix = ("Kompaniya", "Jamiyat", "Uyushma")
        self.loc_suffix = ("shahri", "tog'i", "daryosi")

    def _pick(self, rng, items):
        return items[int(rng.choice(len(items), p=_zipf(len(items))))]

    def _name(self, rng, kind: str) -> list[str]:
        names = self.names[kind]
        if kind == "PER":
            return [self._pick(rng, names) for _ in range(int(rng.integers(1, 3)))]
        if kind == "LOC":
            words = [self._pick(rng, names)]
            if rng.random() < 0.5:
                words.append(str(rng.choice(self.loc_suffix)))
            return words
        return [self._pick(rng, names) for _ in range(int(rng.integers(1, 3)))] + [str(rng.choice(self.org_suffix))]

    def _noun_phrase(self, rng, toks, case: Optional[str]) -> tuple[int, bool]:
        """Append an NP; return (index of its head, plural?)."""
        if rng.random() < 0.25:
            kind = str(rng.choice(ENTITY_TYPES))
            words = self._name(rng, kind)
            first = len(toks)
            for k, w in enumerate(words):
                if k == len(words) - 1 and case:
                    w = w + OBJECT_CASE
                toks.append([w, "NNP", None if k == 0 else first, "root" if k == 0 else "flat"])
            toks[first].append((first, first + len(words) - 1, kind))
            return first, False
        plural = rng.random() < 0.3
        deps = []
        if rng.random() < 0.5:
            toks.append([str(rng.choice(DETERMINERS)), "DT", None, "det"])
            deps.append(len(toks) - 1)
        for _ in range(int(rng.choice([0, 0, 1, 1, 2]))):
            toks.append([self._pick(rng, self.adjectives), "JJ", None, "amod"])
            deps.append(len(toks) - 1)
        noun = self._pick(rng, self.nouns) + (PLURAL if plural else "") + (OBJECT_CASE if case else "")
        toks.append([noun, "NNS" if plural else "NN", None, "root"])
        head = len(toks) - 1
        for d in deps:
            toks[d][2] = head
        return head, plural

    def _clause(self, rng, toks) -> int:
        attach = []
        subj, plural = self._noun_phrase(rng, toks, None)
        attach.append((subj, "nsubj"))
        if rng.random() < 0.7:
            obj, _ = self._noun_phrase(rng, toks, "obj")
            attach.append((obj, "obj"))
        if rng.random() < 0.4:
            noun, _ = self._noun_phrase(rng, toks, None)
            toks.append([str(rng.choice(POSTPOSITIONS)), "IN", noun, "case"])
            attach.append((noun, "obl"))
        if rng.random() < 0.3:
            toks.append([self._pick(rng, self.adverbs), "RB", None, "advmod"])
            attach.append((len(toks) - 1, "advmod"))
        verb = self._pick(rng, self.verbs) + str(rng.choice(VERB_TENSES)) + (PLURAL if plural else "")
        toks.append([verb, "VB", None, "root"])
        v = len(toks) - 1
        for idx, rel in attach:
            toks[idx][2] = v
            toks[idx][3] = rel
        return v

    def sentence(self, rng: np.random.Generator) -> GeneratedSentence:
        toks: list[list] = []
        root = self._clause(rng, toks)
        if rng.random() < 0.2:
            toks.append(["va", "CC", None, "cc"])
            cc = len(toks) - 1
            second = self._clause(rng, toks)
            toks[cc][2] = second
            toks[second][2] = root
            toks[second][3] = "conj"
        toks[root][2] = -1
        entities = [t[4] for t in toks if len(t) > 4]
        words = tuple(t[0] for t in toks)
        xpos = tuple(t[1] for t in toks)
        heads = tuple(t[2] + 1 for t in toks)
        deprels = tuple(t[3] for t in toks)
        return GeneratedSentence(TreebankSentence(words, xpos, heads, deprels), entities)

    def sentences(self, n: int, seed: int) -> list[GeneratedSentence]:
        rng = np.random.default_rng([seed, 0x5E47])
        return [self.sentence(rng) for _ in range(n)]


def treebank(n_sentences: int, seed: int = 0, language_seed: int = 0) -> Treebank:
    lang = SyntheticLanguage(language_seed)
    return Treebank([g.tree for g in lang.sentences(n_sentences, seed)])


def ner_sentences(n_sentences: int, seed: int = 0, language_seed: int = 0, scheme: str = "bioul") -> list[NerSentence]:
    lang = SyntheticLanguage(language_seed)
    return [g.ner(scheme) for g in lang.sentences(n_sentences, seed)]


def documents(n_tokens: int, seed: int = 0, language_seed: int = 0, doc_sentences=(5, 20)) -> list[list[list[str]]]:
    """Unlabeled documents totalling at least ``n_tokens`` words."""
    lang = SyntheticLanguage(language_seed)
    rng = np.random.default_rng([seed, 0xD0C5])
    docs = []
    total = 0
    while total < n_tokens:
        doc = []
        for _ in range(int(rng.integers(doc_sentences[0], doc_sentences[1] + 1))):
            words = list(lang.sentence(rng).words)
            doc.append(words)
            total += len(words)
        docs.append(doc)
    return docs


def write_documents(docs, path) -> None:
    text = "\n\n".join("\n".join(" ".join(s) for s in doc) for doc in docs)
    Path(path).write_text(text + "\n", encoding="utf-8")


def write_fixture(directory, unlabeled_tokens: int = 5000, treebank_sentences: int = 100,
                  ner_sentences_count: int = 100, seed: int = 0) -> dict[str, Path]:
    """Write ``unlabeled.txt``, ``treebank.conllu`` and ``ner.tsv`` (IOB1)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "unlabeled": directory / "unlabeled.txt",
        "treebank": directory / "treebank.conllu",
        "ner": directory / "ner.tsv",
    }
    write_documents(documents(unlabeled_tokens, seed), paths["unlabeled"])
    write_conllu(treebank(treebank_sentences, seed + 1).sentences, paths["treebank"])
    lines = []
    for s in ner_sentences(ner_sentences_count, seed + 2, scheme="iob1"):
        lines.extend(f"{w}\t{t}" for w, t in zip(s.words, s.tags))
        lines.append("")
    paths["ner"].write_text("\n".join(lines) + "\n", encoding="utf-8")
    return paths


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Write a synthetic-language data fixture.")
    parser.add_argument("out_dir")
    parser.add_argument("--unlabeled-tokens", type=int, default=5000)
    parser.add_argument("--treebank-sentences", type=int, default=100)
    parser.add_argument("--ner-sentences", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    paths = write_fixture(args.out_dir, args.unlabeled_tokens, args.treebank_sentences, args.ner_sentences, args.seed)
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

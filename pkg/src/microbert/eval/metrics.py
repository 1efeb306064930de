"""Attachment scores and span F1, as percentages."""

from __future__ import annotations

from collections import Counter
from typing import Sequence

from ..corpus import bioul_spans


def las_uas(
    gold: Sequence[tuple[Sequence[int], Sequence[str]]],
    predicted: Sequence[tuple[Sequence[int], Sequence[str]]],
) -> tuple[float, float]:
    """``(LAS, UAS)`` over aligned sentences of ``(heads, labels)``."""
    if len(gold) != len(predicted):
        raise ValueError(f"{len(gold)} gold sentences but {len(predicted)} predictions")
    words = heads_ok = both_ok = 0
    for k, ((gh, gl), (ph, pl)) in enumerate(zip(gold, predicted)):
        if not (len(gh) == len(gl) == len(ph) == len(pl)):
            raise ValueError(f"sentence {k}: gold has {len(gh)} words, prediction {len(ph)}")
        for a, b, c, d in zip(gh, gl, ph, pl):
            words += 1
            if a == c:
                heads_ok += 1
                if b == d:
                    both_ok += 1
    if words == 0:
        return 0.0, 0.0
    return 100.0 * both_ok / words, 100.0 * heads_ok / words


def span_f1(gold: Sequence[Sequence[str]], predicted: Sequence[Sequence[str]]) -> tuple[float, float, float]:
    """Exact-match ``(precision, recall, F1)`` over typed spans of BIOUL sequences.

    Malformed predictions are repaired as described in ``bioul_spans``.
    """
    if len(gold) != len(predicted):
        raise ValueError(f"{len(gold)} gold sequences but {len(predicted)} predictions")
    g_spans: Counter = Counter()
    p_spans: Counter = Counter()
    for k, (g, p) in enumerate(zip(gold, predicted)):
        if len(g) != len(p):
            raise ValueError(f"sequence {k}: gold has {len(g)} tags, prediction {len(p)}")
        g_spans.update((k, *s) for s in bioul_spans(g))
        p_spans.update((k, *s) for s in bioul_spans(p))
    correct = sum((g_spans & p_spans).values())
    n_pred = sum(p_spans.values())
    n_gold = sum(g_spans.values())
    precision = 100.0 * correct / n_pred if n_pred else 0.0
    recall = 100.0 * correct / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1

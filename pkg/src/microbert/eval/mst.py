"""Maximum spanning arborescence decoding (Chu-Liu/Edmonds) with a single-root constraint.

Score matrices follow the parser convention: ``scores[i, j]`` is the score
of word ``i`` taking ``j`` as its head, node 0 is ROOT, and row 0 is unused.
"""

from __future__ import annotations

from typing import Optional

import numpy as np


def _find_cycle(heads: np.ndarray) -> Optional[list[int]]:
    n = len(heads)
    color = np.zeros(n, dtype=np.int8)  # 0 unseen, 1 on current path, 2 done
    color[0] = 2
    for start in range(1, n):
        path = []
        v = start
        while color[v] == 0:
            color[v] = 1
            path.append(v)
            v = heads[v]
        if color[v] == 1:
            return path[path.index(v):]
        for u in path:
            color[u] = 2
    return None


def chu_liu_edmonds(scores: np.ndarray) -> np.ndarray:
    """Best arborescence rooted at node 0 for ``scores[dependent, head]``.

    Returns ``heads`` with ``heads[0] == -1``.  Any number of words may
    attach to ROOT.
    """
    s = np.array(scores, dtype=np.float64)
    n = s.shape[0]
    s[np.arange(n), np.arange(n)] = -np.inf
    s[0, :] = -np.inf
    heads = np.full(n, -1, dtype=np.int64)
    if n == 1:
        return heads
    heads[1:] = np.argmax(s[1:], axis=1)
    cycle = _find_cycle(heads)
    if cycle is None:
        return heads

    in_cycle = np.zeros(n, dtype=bool)
    in_cycle[cycle] = True
    rest = [v for v in range(n) if not in_cycle[v]]
    c = len(rest)  # index of the contracted node
    new = np.full((c + 1, c + 1), -np.inf)
    cyc = np.array(cycle)
    cycle_score = s[cyc, heads[cyc]]
    enter_via = np.zeros(c + 1, dtype=np.int64)  # for head u outside: which cycle node it enters
    leave_from = np.zeros(c + 1, dtype=np.int64)  # for dependent v outside: which cycle node is its head
    for a, u in enumerate(rest):
        for b, v in enumerate(rest):
            new[b, a] = s[v, u]
        # edge u -> cycle: entering node v replaces its cycle head
        gains = s[cyc, u] - cycle_score
        k = int(np.argmax(gains))
        new[c, a] = gains[k]
        enter_via[a] = cyc[k]
        # edge cycle -> u
        outs = s[u, cyc]
        k = int(np.argmax(outs))
        new[a, c] = outs[k]
        leave_from[a] = cyc[k]
    sub = chu_liu_edmonds(new)

    result = heads.copy()
    for b, v in enumerate(rest):
        if v == 0:
            continue
        h = sub[b]
        result[v] = leave_from[b] if h == c else rest[h]
    entering = sub[c]
    result[enter_via[entering]] = rest[entering]
    return result


def decode_mst(
    arc_scores: np.ndarray,
    label_scores: Optional[np.ndarray] = None,
    single_root: bool = True,
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Heads (1-based, 0 = ROOT) for words 1..n, plus argmax labels at the chosen arcs.

    ``label_scores`` has shape (n+1, n+1, L), indexed like ``arc_scores``.
    With ``single_root`` exactly one word attaches to ROOT: each candidate
    is tried with every other ROOT arc removed and the best tree is kept.
    """
    s = np.asarray(arc_scores, dtype=np.float64)
    n = s.shape[0] - 1
    if s.shape != (n + 1, n + 1):
        raise ValueError(f"arc scores must be square, got {s.shape}")
    if n == 0:
        return np.zeros(0, dtype=np.int64), None if label_scores is None else np.zeros(0, dtype=np.int64)
    if not single_root:
        heads = chu_liu_edmonds(s)[1:]
    else:
        best, best_score = None, -np.inf
        for r in range(1, n + 1):
            constrained = s.copy()
            constrained[1:, 0] = -np.inf
            constrained[r, 0] = s[r, 0]
            h = chu_liu_edmonds(constrained)[1:]
            score = tree_score(s, h)
            if best is None or score > best_score:
                best, best_score = h, score
        heads = best
    labels = None
    if label_scores is not None:
        labels = np.argmax(np.asarray(label_scores)[np.arange(1, n + 1), heads], axis=-1)
    return heads, labels


def tree_score(arc_scores: np.ndarray, heads) -> float:
    heads = np.asarray(heads)
    return float(np.sum(np.asarray(arc_scores)[np.arange(1, len(heads) + 1), heads]))


def is_tree(heads, single_root: bool = True) -> bool:
    """True when 1-based ``heads`` form an arborescence over ROOT."""
    heads = np.asarray(heads)
    n = len(heads)
    if np.any(heads < 0) or np.any(heads > n) or np.any(heads == np.arange(1, n + 1)):
        return False
    if single_root and np.count_nonzero(heads == 0) != 1:
        return False
    full = np.concatenate([[0], heads])
    return _find_cycle(full) is None

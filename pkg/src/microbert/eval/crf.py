"""Linear-chain CRF with explicit start and stop states.

``transitions`` is (K+2, K+2): rows are the source tag, columns the target,
index K is START and K+1 is STOP.  An optional constraint matrix of the
same shape holds 0 for allowed and -inf for forbidden transitions; it is
added to the transitions in training and decoding alike.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..numerics import Tensor, ops


def bioul_constraints(tags: Sequence[str]) -> np.ndarray:
    """0/-inf matrix allowing exactly the transitions of the BIOUL grammar."""
    k = len(tags)
    start, stop = k, k + 1
    parsed = []
    for t in tags:
        parsed.append(("O", None) if t == "O" else (t[0], t[2:]))
    allowed = np.zeros((k + 2, k + 2), dtype=bool)
    for j, (p, _) in enumerate(parsed):
        allowed[start, j] = p in "OBU"
    for i, (pi, ti) in enumerate(parsed):
        allowed[i, stop] = pi in "OUL"
        for j, (pj, tj) in enumerate(parsed):
            if pi in "BI":
                allowed[i, j] = pj in "IL" and tj == ti
            else:
                allowed[i, j] = pj in "OBU"
    return np.where(allowed, 0.0, -np.inf)


def _with_constraints(transitions: Tensor, constraints: Optional[np.ndarray]) -> Tensor:
    if constraints is None:
        return transitions
    return transitions + Tensor(constraints.astype(transitions.dtype))


def log_partition(emissions: Tensor, transitions: Tensor, constraints: Optional[np.ndarray] = None) -> Tensor:
    """log Z by the forward algorithm for one sequence of emissions (n, K)."""
    n, k = emissions.shape
    if n == 0:
        raise ValueError("empty sequence")
    trans = _with_constraints(transitions, constraints)
    inner = trans[:k, :k]
    alpha = trans[k, :k] + emissions[0]
    for t in range(1, n):
        alpha = ops.logsumexp(alpha.reshape(k, 1) + inner, axis=0) + emissions[t]
    return ops.logsumexp(alpha + trans[:k, k + 1], axis=0)


def path_score(emissions: Tensor, transitions: Tensor, tags: Sequence[int], constraints: Optional[np.ndarray] = None) -> Tensor:
    tags = np.asarray(tags, dtype=np.int64)
    n, k = emissions.shape
    if len(tags) != n:
        raise ValueError(f"{len(tags)} tags for {n} positions")
    trans = _with_constraints(transitions, constraints)
    src = np.concatenate([[k], tags])
    dst = np.concatenate([tags, [k + 1]])
    return emissions[np.arange(n), tags].sum() + trans[src, dst].sum()


def crf_nll(emissions: Tensor, transitions: Tensor, tags: Sequence[int], constraints: Optional[np.ndarray] = None) -> Tensor:
    """-(score(gold) - log Z)."""
    return log_partition(emissions, transitions, constraints) - path_score(emissions, transitions, tags, constraints)


def viterbi(emissions: np.ndarray, transitions: np.ndarray, constraints: Optional[np.ndarray] = None) -> tuple[list[int], float]:
    """Best tag path and its score."""
    e = np.asarray(emissions, dtype=np.float64)
    trans = np.asarray(transitions, dtype=np.float64)
    if constraints is not None:
        trans = trans + constraints
    n, k = e.shape
    if n == 0:
        raise ValueError("empty sequence")
    score = trans[k, :k] + e[0]
    back = np.zeros((n, k), dtype=np.int64)
    for t in range(1, n):
        cand = score[:, None] + trans[:k, :k]
        back[t] = np.argmax(cand, axis=0)
        score = cand[back[t], np.arange(k)] + e[t]
    final = score + trans[:k, k + 1]
    last = int(np.argmax(final))
    path = [last]
    for t in range(n - 1, 0, -1):
        path.append(int(back[t, path[-1]]))
    return path[::-1], float(final[last])


def crf_loss_and_decode(
    emissions: Tensor,
    transitions: Tensor,
    gold: Optional[Sequence[int]] = None,
    constraints: Optional[np.ndarray] = None,
):
    """NLL of ``gold`` when given, otherwise the Viterbi path."""
    if gold is not None:
        return crf_nll(emissions, transitions, gold, constraints)
    return viterbi(emissions.data, transitions.data, constraints)[0]

"""Pretraining heads: whole-word dynamic MLM, XPOS tagger, biaffine arc/label scorer.

Conventions for dependency scores: a ROOT state is prepended to the word
states, so a sentence of n words yields an (n+1) x (n+1) arc matrix
``S[i, j]`` = score of word ``i`` taking ``j`` as its head (row 0 is the
ROOT "dependent" and is never scored).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .encoder import EncoderOutput, init_tensor
from .numerics import Tensor, ops
from .tokenizer import MASK_ID, EncodedSentence

MLM, XPOS, PARSE = "mlm", "xpos", "parse"
TASKS = (MLM, XPOS, PARSE)

ACTION_MASK, ACTION_RANDOM, ACTION_KEEP = 0, 1, 2
ACTION_PROBS = (0.8, 0.1, 0.1)


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------


@dataclass
class MaskPlan:
    """Which words of one sentence are corrupted, and how.

    ``positions``/``replacements`` are the flattened per-wordpiece view used
    to rewrite input ids; ``word_indices``/``actions`` the per-word view.
    """

    word_indices: np.ndarray
    actions: np.ndarray
    positions: np.ndarray
    replacements: np.ndarray
    seed: object = None

    def __len__(self) -> int:
        return len(self.positions)

    def apply(self, ids: np.ndarray) -> np.ndarray:
        out = np.array(ids, copy=True)
        out[self.positions] = self.replacements
        return out


def make_mask_plan(
    sentence: EncodedSentence,
    rate: float = 0.15,
    seed=0,
    vocab_size: Optional[int] = None,
    first_regular_id: int = 5,
) -> MaskPlan:
    """Select whole words with probability ``rate`` (at least one word).

    Each selected word gets one action for all of its pieces: ``[MASK]``
    (80%), random non-special piece (10%) or unchanged (10%).
    """
    n = sentence.n_words
    if n < 1:
        raise ValueError("cannot mask an empty sentence")
    rng = np.random.default_rng(seed)
    selected = np.flatnonzero(rng.random(n) < rate)
    if selected.size == 0:
        selected = np.array([rng.integers(n)])
    actions = rng.choice(3, size=selected.size, p=ACTION_PROBS)
    positions = []
    replacements = []
    for word, action in zip(selected, actions):
        start, end = sentence.spans[word]
        width = end - start
        positions.append(np.arange(start, end))
        if action == ACTION_MASK:
            replacements.append(np.full(width, MASK_ID))
        elif action == ACTION_RANDOM:
            if vocab_size is None or vocab_size <= first_regular_id:
                raise ValueError("random substitution needs a vocabulary with regular pieces")
            replacements.append(rng.integers(first_regular_id, vocab_size, size=width))
        else:
            replacements.append(sentence.ids[start:end].copy())
    return MaskPlan(
        word_indices=selected.astype(np.int64),
        actions=actions.astype(np.int64),
        positions=np.concatenate(positions).astype(np.int64),
        replacements=np.concatenate(replacements).astype(np.int64),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def mlm_loss(
    output: EncoderOutput,
    plans: Sequence[Optional[MaskPlan]],
    gold_ids: np.ndarray,
    embedding: Tensor,
    bias: Tensor,
    reduction: str = "mean",
) -> Tensor:
    """Cross-entropy over the vocabulary at masked positions only.

    The output projection is the (tied) input embedding matrix plus ``bias``.
    """
    hidden = output.last
    b, t, h = hidden.shape
    flat = []
    gold = []
    for row, plan in enumerate(plans):
        if plan is None or len(plan) == 0:
            continue
        flat.append(row * t + plan.positions)
        gold.append(gold_ids[row, plan.positions])
    if not flat:
        raise ValueError("mlm_loss: no masked positions")
    flat = np.concatenate(flat)
    gold = np.concatenate(gold)
    picked = hidden.reshape(b * t, h)[flat]
    logits = ops.matmul(picked, embedding.transpose()) + bias
    return ops.cross_entropy(logits, gold, reduction=reduction)


def _valid_rows(states: Tensor, word_mask: np.ndarray) -> Tensor:
    b, w, h = states.shape
    return states.reshape(b * w, h)[np.flatnonzero(word_mask.reshape(-1))]


def xpos_loss(pooled: Tensor, word_mask: np.ndarray, gold: np.ndarray, weight: Tensor, bias: Tensor) -> Tensor:
    """Linear projection of word states to tag logits; mean CE over real words."""
    rows = _valid_rows(pooled, word_mask)
    logits = ops.linear(rows, weight, bias)
    return ops.cross_entropy(logits, gold[word_mask])


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return x.transpose(axes)


def biaffine_arc(head: Tensor, dep: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``S[..., i, j] = head_j . (W dep_i) + bias . head_j``."""
    bilinear = ops.matmul(ops.matmul(dep, weight.transpose()), _swap_last(head))
    linear = ops.matmul(head, bias.reshape(-1, 1))  # (..., n, 1)
    return bilinear + _swap_last(linear)


def biaffine_label(head: Tensor, dep: Tensor, weight: Tensor, linear: Tensor, bias: Tensor) -> Tensor:
    """Per-label scores for aligned (head, dependent) pairs of shape (N, d).

    ``score_l = head . (W_l dep) + linear_l . [head; dep] + bias_l``
    with ``weight`` of shape (L, d, d).
    """
    n, d = head.shape
    n_labels = weight.shape[0]
    w = weight.transpose(1, 0, 2).reshape(d, n_labels * d)  # [a, l*d + b] = W_l[a, b]
    hw = ops.matmul(head, w).reshape(n, n_labels, d)
    bilinear = (hw * dep.reshape(n, 1, d)).sum(axis=-1)
    return bilinear + ops.linear(ops.concat([head, dep], axis=-1), linear, bias)


def arc_loss(scores: Tensor, word_mask: np.ndarray, gold_heads: np.ndarray) -> Tensor:
    """Mean CE of the gold head over each word's candidate heads (ROOT + words)."""
    b, n1, _ = scores.shape
    candidate = np.concatenate([np.ones((b, 1), dtype=bool), word_mask], axis=1)
    masked = ops.masked_fill(scores, ~candidate[:, None, :], -1e9)
    dependents = masked[:, 1:, :].reshape(b * (n1 - 1), n1)
    rows = np.flatnonzero(word_mask.reshape(-1))
    return ops.cross_entropy(dependents[rows], gold_heads[word_mask])


def parse_loss(
    arc_scores: Tensor,
    label_scores: Tensor,
    word_mask: np.ndarray,
    gold_heads: np.ndarray,
    gold_labels: np.ndarray,
) -> Tensor:
    """Head CE plus label CE at the gold arc, each averaged over words.

    ``label_scores`` holds one row per real word (gold-arc teacher forcing).
    """
    return arc_loss(arc_scores, word_mask, gold_heads) + ops.cross_entropy(label_scores, gold_labels[word_mask])


@dataclass
class LossBundle:
    losses: dict[str, Tensor] = field(default_factory=dict)

    def __setitem__(self, task: str, loss: Tensor) -> None:
        self.losses[task] = loss

    def __getitem__(self, task: str) -> Tensor:
        return self.losses[task]

    def __contains__(self, task: str) -> bool:
        return task in self.losses

    def __len__(self) -> int:
        return len(self.losses)

    def values(self) -> dict[str, float]:
        return {k: v.item() for k, v in self.losses.items()}


def aggregate(bundle: LossBundle) -> Tensor:
    """The single loss that starts backpropagation: the sum of task losses."""
    if not len(bundle):
        raise ValueError("aggregate: empty loss bundle")
    total = None
    for loss in bundle.losses.values():
        total = loss if total is None else total + loss
    return total


# ---------------------------------------------------------------------------
# head parameter sets
# ---------------------------------------------------------------------------


class PretrainingHeads:
    """Parameters for the heads enabled by a task list, under ``heads.*``."""

    def __init__(
        self,
        tasks: Sequence[str],
        hidden: int,
        vocab_size: int,
        xpos_inventory: Sequence[str] = (),
        deprel_inventory: Sequence[str] = (),
        arc_dim: int = 100,
        label_dim: int = 100,
        seed: int = 0,
        params: Optional[Mapping[str, Tensor]] = None,
    ):
        unknown = set(tasks) - set(TASKS)
        if unknown:
            raise ValueError(f"unknown tasks {sorted(unknown)}")
        self.tasks = tuple(tasks)
        self.xpos_inventory = list(xpos_inventory)
        self.deprel_inventory = list(deprel_inventory)
        self.xpos_index = {t: i for i, t in enumerate(self.xpos_inventory)}
        self.deprel_index = {t: i for i, t in enumerate(self.deprel_inventory)}
        self.arc_dim = arc_dim
        self.label_dim = label_dim
        shapes = self.parameter_shapes(hidden, vocab_size)
        if params is None:
            rng = np.random.default_rng(seed)
            self.params = {name: init_tensor(name, shape, rng) for name, shape in shapes.items()}
            if f"heads.{PARSE}.root" in self.params:
                self.params[f"heads.{PARSE}.root"].data = (rng.standard_normal(hidden) * 0.02).astype(np.float32)
        else:
            for name, shape in shapes.items():
                if name not in params or params[name].shape != shape:
                    raise ValueError(f"head parameter {name} missing or misshapen")
            self.params = {name: params[name] for name in shapes}

    def parameter_shapes(self, hidden: int, vocab_size: int) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        if MLM in self.tasks:
            shapes[f"heads.{MLM}.bias"] = (vocab_size,)
        if XPOS in self.tasks:
            if not self.xpos_inventory:
                raise ValueError("XPOS head needs a tag inventory")
            shapes[f"heads.{XPOS}.weight"] = (hidden, len(self.xpos_inventory))
            shapes[f"heads.{XPOS}.bias"] = (len(self.xpos_inventory),)
        if PARSE in self.tasks:
            if not self.deprel_inventory:
                raise ValueError("parse head needs a relation inventory")
            p = f"heads.{PARSE}"
            shapes[f"{p}.root"] = (hidden,)
            for name, dim in (("arc_head", self.arc_dim), ("arc_dep", self.arc_dim),
                              ("label_head", self.label_dim), ("label_dep", self.label_dim)):
                shapes[f"{p}.{name}.weight"] = (hidden, dim)
                shapes[f"{p}.{name}.bias"] = (dim,)
            shapes[f"{p}.arc.weight"] = (self.arc_dim, self.arc_dim)
            shapes[f"{p}.arc.head_bias"] = (self.arc_dim,)
            n_labels = len(self.deprel_inventory)
            shapes[f"{p}.label.weight"] = (n_labels, self.label_dim, self.label_dim)
            shapes[f"{p}.label.linear"] = (2 * self.label_dim, n_labels)
            shapes[f"{p}.label.bias"] = (n_labels,)
        return shapes

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def p(self, task: str, name: str) -> Tensor:
        return self.params[f"heads.{task}.{name}"]

    # -- per-task losses ------------------------------------------------------
    def mlm(self, masked: EncoderOutput, plans, embedding: Tensor, reduction: str = "mean") -> Tensor:
        return mlm_loss(masked, plans, masked.batch.ids, embedding, self.p(MLM, "bias"), reduction)

    def xpos(self, plain: EncoderOutput) -> Tensor:
        gold = self._gather_layer(plain, "xpos", self.xpos_index)
        return xpos_loss(plain.pooled, plain.batch.word_mask, gold, self.p(XPOS, "weight"), self.p(XPOS, "bias"))

    def arc_and_label_reps(self, words: Tensor) -> dict[str, Tensor]:
        """Prepend ROOT and run the four single-layer ELU perceptrons."""
        b, _, h = words.shape
        root = self.p(PARSE, "root").reshape(1, 1, h) + Tensor(np.zeros((b, 1, h), dtype=words.dtype))
        states = ops.concat([root, words], axis=1)
        return {
            name: ops.elu(ops.linear(states, self.p(PARSE, f"{name}.weight"), self.p(PARSE, f"{name}.bias")))
            for name in ("arc_head", "arc_dep", "label_head", "label_dep")
        }

    def parse(self, plain: EncoderOutput) -> Tensor:
        heads = self._gather_layer(plain, "heads", None)
        labels = self._gather_layer(plain, "deprels", self.deprel_index)
        reps = self.arc_and_label_reps(plain.pooled)
        scores = biaffine_arc(reps["arc_head"], reps["arc_dep"], self.p(PARSE, "arc.weight"), self.p(PARSE, "arc.head_bias"))
        label_scores = self.gold_label_scores(reps, plain.batch.word_mask, heads)
        return parse_loss(scores, label_scores, plain.batch.word_mask, heads, labels)

    def gold_label_scores(self, reps, word_mask: np.ndarray, heads: np.ndarray) -> Tensor:
        b, n1, d = reps["label_head"].shape
        rows_b, rows_w = np.nonzero(word_mask)
        head_rows = rows_b * n1 + heads[rows_b, rows_w]
        dep_rows = rows_b * n1 + rows_w + 1
        lh = reps["label_head"].reshape(b * n1, d)[head_rows]
        ld = reps["label_dep"].reshape(b * n1, d)[dep_rows]
        return biaffine_label(lh, ld, self.p(PARSE, "label.weight"), self.p(PARSE, "label.linear"), self.p(PARSE, "label.bias"))

    @staticmethod
    def _gather_layer(out: EncoderOutput, layer: str, index: Optional[dict]) -> np.ndarray:
        mask = out.batch.word_mask
        gold = np.zeros(mask.shape, dtype=np.int64)
        for row, sent in enumerate(out.batch.sentences):
            values = getattr(sent, layer)
            if values is None:
                raise ValueError(f"sentence lacks the {layer} layer")
            if index is None:
                gold[row, : len(values)] = values
            else:
                try:
                    gold[row, : len(values)] = [index[v] for v in values]
                except KeyError as exc:
                    raise ValueError(f"{layer} value {exc.args[0]!r} outside the inventory") from None
        return gold

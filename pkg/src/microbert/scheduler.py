"""Multitask epoch construction.

An epoch is a fixed number of batches.  Every batch is drawn from exactly one
task's dataset, and task ``t`` gets at least ``floor(weight_t * n_batches)``
of them; leftover slots go to the largest fractional remainders.  The
resulting multiset of task labels is shuffled with a seed derived from
``(seed, epoch)``.

Instances of a dataset are consumed from an endless stream made of
successive seeded permutations ("passes"); exhausting one pass continues
with a freshly shuffled one.  Epoch ``e`` starts where epoch ``e - 1``
stopped, which is computable up front because per-epoch batch counts do not
depend on the epoch.  Schedules are therefore pure functions of the plan
and the epoch index.
"""

from __future__ import annotations

import logging
import math
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .heads import MLM, PARSE, XPOS
from .tokenizer import EncodedSentence

logger = logging.getLogger(__name__)


def plan_from_ratio(ratio: Sequence[float]) -> tuple[float, ...]:
    """Normalize a ratio such as (8, 1, 1) into weights summing to one."""
    if not len(ratio):
        raise ValueError("empty task ratio")
    if any(r < 0 for r in ratio):
        raise ValueError(f"negative entry in ratio {tuple(ratio)}")
    total = math.fsum(ratio)
    if total <= 0:
        raise ValueError(f"ratio {tuple(ratio)} has no positive entry")
    return tuple(r / total for r in ratio)


@dataclass
class TrainPlan:
    """Tasks, one dataset per task, task weights and epoch geometry."""

    tasks: tuple[str, ...]
    datasets: tuple[Sequence, ...]
    weights: tuple[float, ...]
    batches_per_epoch: int = 8000
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        self.datasets = tuple(self.datasets)
        if not (len(self.tasks) == len(self.datasets) == len(self.weights)):
            raise ValueError("tasks, datasets and weights must have equal length")
        weights = plan_from_ratio(self.weights)
        keep = [i for i, w in enumerate(weights) if w > 0]
        if len(keep) < len(weights):
            dropped = [self.tasks[i] for i in range(len(weights)) if i not in keep]
            warnings.warn(f"dropping tasks with zero weight: {dropped}", stacklevel=2)
        self.tasks = tuple(self.tasks[i] for i in keep)
        self.datasets = tuple(self.datasets[i] for i in keep)
        self.weights = tuple(weights[i] for i in keep)
        for task, data in zip(self.tasks, self.datasets):
            if len(data) == 0:
                raise ValueError(f"dataset for task {task!r} is empty")
        if self.batches_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("batches_per_epoch and batch_size must be positive")

    @classmethod
    def from_ratio(cls, tasks, datasets, ratio, **kwargs) -> "TrainPlan":
        return cls(tuple(tasks), tuple(datasets), plan_from_ratio(ratio), **kwargs)


@dataclass(frozen=True)
class BatchDescriptor:
    task: str
    dataset: int
    indices: tuple[int, ...]


@dataclass
class EpochSchedule:
    epoch: int
    batches: list[BatchDescriptor]

    def __len__(self) -> int:
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)

    def counts(self) -> Counter:
        return Counter(b.dataset for b in self.batches)


def quotas(weights: Sequence[float], n_batches: int) -> list[int]:
    """Floor quotas plus largest-remainder allocation of the leftover slots."""
    exact = [w * n_batches for w in weights]
    # guard against 0.29 * 100 == 28.999999999999996
    floors = [int(math.floor(x + 1e-9)) for x in exact]
    leftover = n_batches - sum(floors)
    order = sorted(range(len(weights)), key=lambda i: (-(exact[i] - floors[i]), i))
    for k in range(leftover):
        floors[order[k % len(order)]] += 1
    return floors


def _stream_slice(size: int, start: int, count: int, seed: int, task_index: int) -> np.ndarray:
    """Entries [start, start+count) of the endless pass-by-pass permutation stream."""
    out = np.empty(count, dtype=np.int64)
    filled = 0
    pos = start
    while filled < count:
        pass_no, offset = divmod(pos, size)
        perm = np.random.default_rng([seed, task_index, pass_no]).permutation(size)
        take = min(size - offset, count - filled)
        out[filled:filled + take] = perm[offset:offset + take]
        filled += take
        pos += take
    return out


def build_epoch(plan: TrainPlan, epoch: int) -> EpochSchedule:
    counts = quotas(plan.weights, plan.batches_per_epoch)
    labels = np.repeat(np.arange(len(plan.tasks)), counts)
    order = np.random.default_rng([plan.seed, epoch, 7919]).permutation(labels)

    streams = []
    for t, data in enumerate(plan.datasets):
        need = counts[t] * plan.batch_size
        streams.append(_stream_slice(len(data), epoch * need, need, plan.seed, t))
    cursor = [0] * len(plan.tasks)
    batches = []
    for t in order:
        t = int(t)
        idx = streams[t][cursor[t]:cursor[t] + plan.batch_size]
        cursor[t] += plan.batch_size
        batches.append(BatchDescriptor(plan.tasks[t], t, tuple(int(i) for i in idx)))
    return EpochSchedule(epoch, batches)


def route(sentences: Iterable[EncodedSentence], enabled: Sequence[str]) -> set[str]:
    """Heads that can consume a batch, given its annotation layers.

    MLM needs only text; XPOS needs tags; parsing needs heads and relations.
    """
    sentences = list(sentences)
    heads = set()
    if MLM in enabled:
        heads.add(MLM)
    if XPOS in enabled and all(s.xpos is not None for s in sentences):
        heads.add(XPOS)
    if PARSE in enabled and all(s.heads is not None and s.deprels is not None for s in sentences):
        heads.add(PARSE)
    return heads


def materialize(plan: TrainPlan, descriptor: BatchDescriptor) -> list:
    data = plan.datasets[descriptor.dataset]
    return [data[i] for i in descriptor.indices]


def describe(descriptor: BatchDescriptor, epoch: Optional[int] = None, position: Optional[int] = None) -> str:
    where = "" if epoch is None else f"epoch {epoch} batch {position}: "
    head = ",".join(str(i) for i in descriptor.indices[:6])
    return f"{where}task {descriptor.task!r} dataset {descriptor.dataset} instances [{head}...]"

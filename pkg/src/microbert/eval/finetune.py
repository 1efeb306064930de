"""Fine-tuning a pretrained encoder for dependency parsing or NER.

Both task models read nothing from a sentence except the encoder's hidden
states: a learned scalar mix over all layers, averaged to word level, then a
BiLSTM stack and the task scorer (biaffine arcs and labels, or a CRF).
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..checkpoint import Checkpoint
from ..corpus import NerSentence, TreebankSentence
from ..encoder import Encoder, EncoderConfig, EncoderOutput, collate, init_tensor
from ..heads import arc_loss, biaffine_arc, biaffine_label
from ..numerics import AdamW, Tensor, clip_grad_norm, no_grad, ops
from ..scheduler import _stream_slice
from ..tokenizer import EncodedSentence, Vocabulary, encode
from .crf import bioul_constraints, crf_nll, viterbi
from .layers import BiLSTM, ScalarMix
from .metrics import las_uas, span_f1
from .mst import decode_mst

logger = logging.getLogger(__name__)

PARSE, NER = "parse", "ner"

# task-specific defaults; ``None`` fields of EvalConfig resolve to these
TASK_DEFAULTS = {
    PARSE: dict(batches_per_epoch=200, encoder_lr=5e-5, lstm_layers=3, lstm_hidden=400,
                dropout=0.3, recurrent_dropout=0.3, highway=True),
    NER: dict(batches_per_epoch=None, encoder_lr=1e-5, lstm_layers=2, lstm_hidden=200,
              dropout=0.5, recurrent_dropout=0.0, highway=False),
}


@dataclass
class EvalConfig:
    task: str = PARSE
    epochs: int = 300
    batch_size: int = 16
    patience: int = 50
    batches_per_epoch: Optional[int] = None
    lr: float = 1e-3
    encoder_lr: Optional[float] = None
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    arc_dim: int = 100
    label_dim: int = 100
    lstm_layers: Optional[int] = None
    lstm_hidden: Optional[int] = None
    dropout: Optional[float] = None
    recurrent_dropout: Optional[float] = None
    highway: Optional[bool] = None
    input_dropout: bool = True
    freeze_encoder: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASK_DEFAULTS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {sorted(TASK_DEFAULTS)}")
        defaults = TASK_DEFAULTS[self.task]
        for key, value in defaults.items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs, batch_size and patience must be positive")
        if self.batches_per_epoch is not None and self.batches_per_epoch < 1:
            raise ValueError("batches_per_epoch must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TaskData:
    vocab: Vocabulary
    train: list[EncodedSentence]
    dev: list[EncodedSentence]
    test: list[EncodedSentence]
    labels: list[str]

    def split(self, name: str) -> list[EncodedSentence]:
        return {"train": self.train, "dev": self.dev, "test": self.test}[name]


def prepare_parse_data(
    train: Sequence[TreebankSentence],
    dev: Sequence[TreebankSentence],
    test: Sequence[TreebankSentence],
    vocab: Vocabulary,
    deprel_inventory: Optional[Sequence[str]] = None,
) -> TaskData:
    """Encode gold-tokenized treebank splits."""
    def enc(sents):
        return [encode(s.words, vocab, xpos=s.xpos, heads=s.heads, deprels=s.deprels) for s in sents]

    if deprel_inventory is None:
        deprel_inventory = sorted({r for s in list(train) + list(dev) + list(test) for r in s.deprels})
    return TaskData(vocab, enc(train), enc(dev), enc(test), list(deprel_inventory))


def prepare_ner_data(
    train: Sequence[NerSentence],
    dev: Sequence[NerSentence],
    test: Sequence[NerSentence],
    vocab: Vocabulary,
) -> TaskData:
    """Encode BIOUL-tagged splits; the label set is O plus B/I/L/U for every type seen."""
    types = sorted({t[2:] for s in list(train) + list(dev) + list(test) for t in s.tags if t != "O"})
    labels = ["O"] + [f"{p}-{t}" for t in types for p in "BILU"]

    def enc(sents):
        return [encode(s.words, vocab, ner=s.tags) for s in sents]

    return TaskData(vocab, enc(train), enc(dev), enc(test), labels)


# ---------------------------------------------------------------------------
# task models
# ---------------------------------------------------------------------------


class TaskModel:
    """Encoder, scalar mix and BiLSTM shared by both task models."""

    # the only sentence-derived input; checked by build_model
    INPUTS = ("encoder_states",)

    def __init__(self, encoder: Encoder, config: EvalConfig, labels: Sequence[str]):
        self.encoder = encoder
        self.config = config
        self.labels = list(labels)
        self.label_index = {t: i for i, t in enumerate(self.labels)}
        self.mix = ScalarMix(encoder.config.layers + 1, prefix="task.mix")
        self.lstm = BiLSTM(
            encoder.config.hidden, config.lstm_hidden, config.lstm_layers,
            config.recurrent_dropout, config.highway, seed=config.seed + 11, prefix="task.lstm",
        )
        self.task_params: dict[str, Tensor] = {**self.mix.params, **self.lstm.params}

    def features(self, out: EncoderOutput, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
        """Word-level contextual states (B, W, 2*lstm_hidden) from encoder states alone."""
        words = out.pool(self.mix(out.hidden_states))
        p = self.config.dropout
        if self.config.input_dropout:
            words = ops.dropout(words, p, rng, training)
        states = self.lstm(words, out.batch.n_words, training=training, rng=rng)
        return ops.dropout(states, p, rng, training)

    def encode(self, sentences, training: bool, rng) -> EncoderOutput:
        encoder_training = training and not self.config.freeze_encoder
        if self.config.freeze_encoder:
            with no_grad():
                out = self.encoder(collate(sentences), training=False)
            out.hidden_states = [Tensor(h.data) for h in out.hidden_states]
            return out
        return self.encoder(collate(sentences), training=encoder_training, rng=rng)

    @property
    def params(self) -> dict[str, Tensor]:
        return {**self.encoder.params, **self.task_params}

    def trainable_params(self) -> dict[str, Tensor]:
        if self.config.freeze_encoder:
            return dict(self.task_params)
        return self.params


def _init(names_shapes: dict, rng) -> dict[str, Tensor]:
    return {name: init_tensor(name, shape, rng, std=1.0 / math.sqrt(shape[0])) for name, shape in names_shapes.items()}


class ParserModel(TaskModel):
    def __init__(self, encoder: Encoder, config: EvalConfig, labels: Sequence[str]):
        super().__init__(encoder, config, labels)
        d = self.lstm.output_dim
        a, l, n = config.arc_dim, config.label_dim, len(self.labels)
        rng = np.random.default_rng([config.seed, 23])
        shapes = {
            "task.parse.root": (d,),
            "task.parse.arc_head.weight": (d, a), "task.parse.arc_head.bias": (a,),
            "task.parse.arc_dep.weight": (d, a), "task.parse.arc_dep.bias": (a,),
            "task.parse.label_head.weight": (d, l), "task.parse.label_head.bias": (l,),
            "task.parse.label_dep.weight": (d, l), "task.parse.label_dep.bias": (l,),
            "task.parse.arc.weight": (a, a), "task.parse.arc.head_bias": (a,),
            "task.parse.label.weight": (n, l, l), "task.parse.label.linear": (2 * l, n),
            "task.parse.label.bias": (n,),
        }
        params = _init(shapes, rng)
        params["task.parse.root"].data = (rng.standard_normal(d) * 0.1).astype(np.float32)
        params["task.parse.arc.weight"].data[:] = 0
        params["task.parse.label.weight"].data[:] = 0
        self.task_params.update(params)

    def _p(self, name: str) -> Tensor:
        return self.task_params[f"task.parse.{name}"]

    def _reps(self, states: Tensor) -> dict[str, Tensor]:
        b, _, d = states.shape
        root = self._p("root").reshape(1, 1, d) + Tensor(np.zeros((b, 1, d), dtype=states.dtype))
        full = ops.concat([root, states], axis=1)
        return {
            name: ops.elu(ops.linear(full, self._p(f"{name}.weight"), self._p(f"{name}.bias")))
            for name in ("arc_head", "arc_dep", "label_head", "label_dep")
        }

    def _label_scores(self, reps, word_mask: np.ndarray, heads: np.ndarray) -> Tensor:
        b, n1, d = reps["label_head"].shape
        rows_b, rows_w = np.nonzero(word_mask)
        lh = reps["label_head"].reshape(b * n1, d)[rows_b * n1 + heads[rows_b, rows_w]]
        ld = reps["label_dep"].reshape(b * n1, d)[rows_b * n1 + rows_w + 1]
        return biaffine_label(lh, ld, self._p("label.weight"), self._p("label.linear"), self._p("label.bias"))

    def _gold(self, sentences, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        heads = np.zeros(mask.shape, dtype=np.int64)
        labels = np.zeros(mask.shape, dtype=np.int64)
        for row, s in enumerate(sentences):
            heads[row, : s.n_words] = s.heads
            labels[row, : s.n_words] = [self.label_index[r] for r in s.deprels]
        return heads, labels

    def loss(self, sentences, training: bool = True, rng=None) -> Tensor:
        out = self.encode(sentences, training, rng)
        reps = self._reps(self.features(out, training, rng))
        mask = out.batch.word_mask
        heads, labels = self._gold(sentences, mask)
        scores = biaffine_arc(reps["arc_head"], reps["arc_dep"], self._p("arc.weight"), self._p("arc.head_bias"))
        label_scores = self._label_scores(reps, mask, heads)
        return arc_loss(scores, mask, heads) + ops.cross_entropy(label_scores, labels[mask])

    def predict(self, sentences) -> list[tuple[list[int], list[str]]]:
        with no_grad():
            out = self.encode(sentences, False, None)
            reps = self._reps(self.features(out, False, None))
            scores = biaffine_arc(reps["arc_head"], reps["arc_dep"], self._p("arc.weight"), self._p("arc.head_bias")).data
            mask = out.batch.word_mask
            heads = np.zeros(mask.shape, dtype=np.int64)
            for row, s in enumerate(sentences):
                n = s.n_words
                heads[row, :n], _ = decode_mst(scores[row, : n + 1, : n + 1])
            label_ids = np.argmax(self._label_scores(reps, mask, heads).data, axis=-1)
        result = []
        k = 0
        for row, s in enumerate(sentences):
            n = s.n_words
            result.append(([int(h) for h in heads[row, :n]], [self.labels[i] for i in label_ids[k:k + n]]))
            k += n
        return result

    def score(self, sentences) -> dict[str, float]:
        pred = self.predict_all(sentences)
        gold = [(list(s.heads), list(s.deprels)) for s in sentences]
        las, uas = las_uas(gold, pred)
        return {"las": las, "uas": uas}

    def predict_all(self, sentences, batch_size: int = 64):
        out = []
        for i in range(0, len(sentences), batch_size):
            out.extend(self.predict(sentences[i:i + batch_size]))
        return out


class NerModel(TaskModel):
    def __init__(self, encoder: Encoder, config: EvalConfig, labels: Sequence[str]):
        super().__init__(encoder, config, labels)
        k = len(self.labels)
        rng = np.random.default_rng([config.seed, 29])
        self.task_params.update(_init({
            "task.ner.proj.weight": (self.lstm.output_dim, k),
            "task.ner.proj.bias": (k,),
        }, rng))
        self.task_params["task.ner.transitions"] = Tensor(
            np.zeros((k + 2, k + 2), dtype=np.float32), requires_grad=True, name="task.ner.transitions",
        )
        self.constraints = bioul_constraints(self.labels)

    def emissions(self, sentences, training: bool, rng) -> tuple[Tensor, np.ndarray]:
        out = self.encode(sentences, training, rng)
        feats = self.features(out, training, rng)
        em = ops.linear(feats, self.task_params["task.ner.proj.weight"], self.task_params["task.ner.proj.bias"])
        return em, out.batch.n_words

    def loss(self, sentences, training: bool = True, rng=None) -> Tensor:
        em, lengths = self.emissions(sentences, training, rng)
        trans = self.task_params["task.ner.transitions"]
        total = None
        for row, s in enumerate(sentences):
            gold = [self.label_index[t] for t in s.ner]
            nll = crf_nll(em[row, : lengths[row]], trans, gold, self.constraints)
            total = nll if total is None else total + nll
        return total * (1.0 / len(sentences))

    def predict(self, sentences) -> list[list[str]]:
        with no_grad():
            em, lengths = self.emissions(sentences, False, None)
        trans = self.task_params["task.ner.transitions"].data
        return [
            [self.labels[i] for i in viterbi(em.data[row, : lengths[row]], trans, self.constraints)[0]]
            for row in range(len(sentences))
        ]

    def predict_all(self, sentences, batch_size: int = 64):
        out = []
        for i in range(0, len(sentences), batch_size):
            out.extend(self.predict(sentences[i:i + batch_size]))
        return out

    def score(self, sentences) -> dict[str, float]:
        pred = self.predict_all(sentences)
        p, r, f = span_f1([list(s.ner) for s in sentences], pred)
        return {"precision": p, "recall": r, "f1": f}


MAIN_METRIC = {PARSE: "las", NER: "f1"}


def encoder_from_checkpoint(ckpt: Checkpoint) -> Encoder:
    cfg = EncoderConfig.from_dict(ckpt.config["encoder"])
    params = {
        name: Tensor(array.copy(), requires_grad=True, name=name)
        for name, array in ckpt.model_tensors().items() if name.startswith("encoder.")
    }
    return Encoder(cfg, params=params)


def build_model(config: EvalConfig, ckpt: Checkpoint, data: TaskData) -> TaskModel:
    if ckpt.vocab != data.vocab:
        raise ValueError("checkpoint vocabulary differs from the tokenizer used to encode the task data")
    encoder = encoder_from_checkpoint(ckpt)
    if encoder.config.vocab_size != len(data.vocab):
        raise ValueError(f"checkpoint vocab_size {encoder.config.vocab_size} != vocabulary size {len(data.vocab)}")
    cls = ParserModel if config.task == PARSE else NerModel
    model = cls(encoder, config, data.labels)
    assert model.INPUTS == ("encoder_states",), "task models may only read encoder states"
    if config.freeze_encoder:
        for p in encoder.params.values():
            p.requires_grad = False
    return model


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    dev: dict[str, float]
    seconds: float


@dataclass
class FinetuneResult:
    model: TaskModel
    metrics: dict[str, dict[str, float]]
    history: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int = 0
    checkpoint_id: str = ""

    def rows(self, task: str, seed: int) -> list[dict]:
        return [
            {"task": task, "split": split, "metric": metric, "value": value,
             "seed": seed, "checkpoint": self.checkpoint_id}
            for split, values in self.metrics.items() for metric, value in values.items()
        ]


def _epoch_batches(config: EvalConfig, n: int, epoch: int) -> list[np.ndarray]:
    bs = config.batch_size
    if config.batches_per_epoch is None:
        order = np.random.default_rng([config.seed, epoch, 101]).permutation(n)
        return [order[i:i + bs] for i in range(0, n, bs)]
    need = config.batches_per_epoch * bs
    stream = _stream_slice(n, epoch * need, need, config.seed, 101)
    return [stream[i:i + bs] for i in range(0, need, bs)]


def finetune(
    config: EvalConfig,
    ckpt: Checkpoint,
    data: TaskData,
    score_splits: Sequence[str] = ("dev", "test"),
    progress: bool = False,
) -> FinetuneResult:
    """Train with dev-metric early stopping; score the best model on ``score_splits``."""
    if not data.train:
        raise ValueError("empty training split")
    dev = data.dev or data.train
    model = build_model(config, ckpt, data)
    groups = [(model.task_params, config.lr)]
    if not config.freeze_encoder:
        groups.append((model.encoder.params, config.encoder_lr))
    optimizer = AdamW(groups, lr=config.lr, betas=config.betas, weight_decay=config.weight_decay)
    trainable = list(model.trainable_params().values())
    metric = MAIN_METRIC[config.task]

    best_value = -math.inf
    best_state = None
    best_epoch = 0
    since_best = 0
    history = []
    for epoch in range(config.epochs):
        started = time.perf_counter()
        losses = []
        for step, idx in enumerate(_epoch_batches(config, len(data.train), epoch)):
            rng = np.random.default_rng([config.seed, epoch, step, 3])
            loss = model.loss([data.train[i] for i in idx], training=True, rng=rng)
            optimizer.zero_grad()
            loss.backward()
            clip_grad_norm(trainable, config.clip_norm)
            optimizer.step()
            losses.append(loss.item())
        dev_scores = model.score(dev)
        record = EpochMetrics(epoch, float(np.mean(losses)), dev_scores, time.perf_counter() - started)
        history.append(record)
        if progress:
            logger.info("epoch %d loss=%.4f dev %s=%.2f (%.1fs)", epoch, record.train_loss, metric,
                        dev_scores[metric], record.seconds)
        if dev_scores[metric] > best_value:
            best_value = dev_scores[metric]
            best_state = {k: p.data.copy() for k, p in model.params.items()}
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    for k, p in model.params.items():
        p.data = best_state[k]
    metrics = {split: model.score(data.split(split) or data.train) for split in score_splits}
    return FinetuneResult(model, metrics, history, best_epoch, ckpt.identity())


REPORT_FIELDS = ("task", "split", "metric", "value", "seed", "checkpoint")


def write_report(rows: Sequence[dict], path) -> None:
    """CSV when ``path`` ends in .csv, JSON otherwise."""
    path = Path(path)
    if path.suffix == ".csv":
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
            writer.writeheader()
            writer.writerows(rows)
    else:
        path.write_text(json.dumps(list(rows), indent=2) + "\n", encoding="utf-8")

"""Multitask pretraining loop with validation-perplexity model selection."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .corpus import Treebank, UnlabeledCorpus, chunk_sequences
from .encoder import Encoder, EncoderConfig, collate, micro_config
from .heads import MLM, PARSE, TASKS, XPOS, LossBundle, PretrainingHeads, aggregate, make_mask_plan
from .numerics import AdamW, PlateauSchedule, Tensor, clip_grad_norm, no_grad
from .scheduler import TrainPlan, build_epoch, describe, materialize, route
from .tokenizer import EncodedSentence, Vocabulary, encode

logger = logging.getLogger(__name__)

RUNLOG_FIELDS = ("epoch", "loss_mlm", "loss_xpos", "loss_parse", "val_ppl", "lr", "seconds")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class PretrainConfig:
    encoder: EncoderConfig = field(default_factory=micro_config)
    tasks: tuple[str, ...] = (MLM,)
    ratio: tuple[float, ...] = (1,)
    lr: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    plateau_patience: int = 2
    plateau_factor: float = 0.5
    min_lr: float = 5e-5
    epochs: int = 200
    batches_per_epoch: int = 8000
    batch_size: int = 32
    early_stop_patience: int = 40
    mask_rate: float = 0.15
    clip_norm: Optional[float] = None
    arc_dim: int = 100
    label_dim: int = 100
    seed: int = 0
    validation_seed: int = 12345
    validation_batch_size: int = 64
    output_dir: Optional[str] = None

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        self.ratio = tuple(self.ratio)
        if MLM not in self.tasks:
            raise ValueError("pretraining needs the MLM task (validation is MLM perplexity)")
        if len(self.tasks) != len(self.ratio):
            raise ValueError(f"{len(self.tasks)} tasks but {len(self.ratio)} ratio entries")
        for name in ("lr", "min_lr", "epochs", "batches_per_epoch", "batch_size", "early_stop_patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        d["tasks"] = list(self.tasks)
        d["ratio"] = list(self.ratio)
        d["betas"] = list(self.betas)
        return d


@dataclass
class PretrainData:
    """Encoded inputs for one run.  ``treebank`` is needed for XPOS/parse tasks."""

    vocab: Vocabulary
    train: list[EncodedSentence]
    validation: list[EncodedSentence]
    treebank: list[EncodedSentence] = field(default_factory=list)
    xpos_inventory: list[str] = field(default_factory=list)
    deprel_inventory: list[str] = field(default_factory=list)


def prepare_data(
    unlabeled: UnlabeledCorpus,
    vocab: Vocabulary,
    treebank: Optional[Treebank] = None,
    max_wordpieces: int = 500,
) -> PretrainData:
    """Encode and chunk the unlabeled splits; encode the treebank with its layers."""
    def plain(sentences):
        return list(chunk_sequences((encode(s, vocab) for s in sentences), max_wordpieces))

    tb: list[EncodedSentence] = []
    xpos_inv: list[str] = []
    deprel_inv: list[str] = []
    if treebank is not None:
        tb = list(chunk_sequences(
            (encode(s.words, vocab, xpos=s.xpos, heads=s.heads, deprels=s.deprels) for s in treebank),
            max_wordpieces, labeled=True,
        ))
        xpos_inv, deprel_inv = list(treebank.xpos_inventory), list(treebank.deprel_inventory)
    return PretrainData(
        vocab, plain(unlabeled.train_sentences()), plain(unlabeled.validation_sentences()),
        tb, xpos_inv, deprel_inv,
    )


class MicroBERT:
    """An encoder plus its pretraining heads."""

    def __init__(self, encoder: Encoder, heads: PretrainingHeads, vocab: Vocabulary):
        if encoder.config.vocab_size != len(vocab):
            raise ValueError(
                f"encoder vocab_size {encoder.config.vocab_size} != tokenizer vocabulary {len(vocab)}"
            )
        self.encoder = encoder
        self.heads = heads
        self.vocab = vocab

    @classmethod
    def create(cls, config: PretrainConfig, vocab: Vocabulary, xpos_inventory=(), deprel_inventory=()) -> "MicroBERT":
        encoder = Encoder(config.encoder, seed=config.seed)
        heads = PretrainingHeads(
            config.tasks, config.encoder.hidden, config.encoder.vocab_size,
            xpos_inventory, deprel_inventory, config.arc_dim, config.label_dim, seed=config.seed + 1,
        )
        return cls(encoder, heads, vocab)

    @property
    def params(self) -> dict[str, Tensor]:
        return {**self.encoder.params, **self.heads.params}

    def num_parameters(self) -> int:
        return self.encoder.num_parameters() + self.heads.num_parameters()

    @property
    def embedding(self) -> Tensor:
        return self.encoder.p("embeddings.word.weight")

    def losses(
        self,
        sentences: Sequence[EncodedSentence],
        enabled: Sequence[str],
        mask_seed,
        mask_rate: float = 0.15,
        training: bool = True,
        rng: Optional[np.random.Generator] = None,
    ) -> LossBundle:
        """Route a batch to every compatible head.

        MLM reads a masked pass; XPOS and parsing share one unmasked pass.
        """
        heads = route(sentences, enabled)
        batch = collate(sentences)
        bundle = LossBundle()
        vocab_size = len(self.vocab)
        if MLM in heads:
            plans = [
                make_mask_plan(s, mask_rate, seed=[*_as_list(mask_seed), i], vocab_size=vocab_size)
                for i, s in enumerate(sentences)
            ]
            masked = self.encoder(batch, mask_plans=plans, training=training, rng=rng)
            bundle[MLM] = self.heads.mlm(masked, plans, self.embedding)
        if XPOS in heads or PARSE in heads:
            plain = self.encoder(batch, training=training, rng=rng)
            if XPOS in heads:
                bundle[XPOS] = self.heads.xpos(plain)
            if PARSE in heads:
                bundle[PARSE] = self.heads.parse(plain)
        return bundle

    def config_dict(self, pretrain: Optional[PretrainConfig] = None) -> dict:
        return {
            "encoder": self.encoder.config.to_dict(),
            "heads": {
                "tasks": list(self.heads.tasks),
                "xpos_inventory": list(self.heads.xpos_inventory),
                "deprel_inventory": list(self.heads.deprel_inventory),
                "arc_dim": self.heads.arc_dim,
                "label_dim": self.heads.label_dim,
            },
            "pretrain": None if pretrain is None else pretrain.to_dict(),
        }

    def to_checkpoint(self, optimizer: Optional[AdamW] = None, pretrain=None, metadata=None) -> Checkpoint:
        tensors = {name: t.data.copy() for name, t in self.params.items()}
        meta = dict(metadata or {})
        if optimizer is not None:
            for name in optimizer.params:
                tensors[f"optimizer.m.{name}"] = optimizer.state.m[name].copy()
                tensors[f"optimizer.v.{name}"] = optimizer.state.v[name].copy()
            meta["optimizer"] = {
                "t": optimizer.state.t,
                "lr": optimizer.lr,
                "betas": list(optimizer.state.betas),
                "eps": optimizer.state.eps,
                "weight_decay": optimizer.state.weight_decay,
            }
        return Checkpoint(self.config_dict(pretrain), self.vocab, tensors, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "MicroBERT":
        enc_cfg = EncoderConfig.from_dict(ckpt.config["encoder"])
        tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in ckpt.model_tensors().items()}
        encoder = Encoder(enc_cfg, params={k: v for k, v in tensors.items() if k.startswith("encoder.")})
        h = ckpt.config["heads"]
        heads = PretrainingHeads(
            h["tasks"], enc_cfg.hidden, enc_cfg.vocab_size, h["xpos_inventory"], h["deprel_inventory"],
            h["arc_dim"], h["label_dim"], params={k: v for k, v in tensors.items() if k.startswith("heads.")},
        )
        return cls(encoder, heads, ckpt.vocab)


def _as_list(seed) -> list:
    if isinstance(seed, (list, tuple)):
        return list(seed)
    return [seed]


def validation_perplexity(
    model: MicroBERT,
    sentences: Sequence[EncodedSentence],
    mask_seed: int = 12345,
    mask_rate: float = 0.15,
    batch_size: int = 64,
) -> float:
    """exp(mean NLL over masked wordpieces) under fixed, seed-determined masks."""
    if not sentences:
        raise ValueError("validation set is empty")
    total = 0.0
    count = 0
    vocab_size = len(model.vocab)
    with no_grad():
        for start in range(0, len(sentences), batch_size):
            chunk = sentences[start:start + batch_size]
            plans = [
                make_mask_plan(s, mask_rate, seed=[mask_seed, start + i], vocab_size=vocab_size)
                for i, s in enumerate(chunk)
            ]
            out = model.encoder(collate(chunk), mask_plans=plans, training=False)
            nll = model.heads.mlm(out, plans, model.embedding, reduction="sum")
            total += float(nll.item())
            count += sum(len(p) for p in plans)
    return math.exp(total / count)


@dataclass
class EpochRecord:
    epoch: int
    loss_mlm: Optional[float]
    loss_xpos: Optional[float]
    loss_parse: Optional[float]
    val_ppl: float
    lr: float
    seconds: float


@dataclass
class RunLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(RUNLOG_FIELDS)
            for r in self.records:
                writer.writerow([
                    r.epoch,
                    *("" if v is None else repr(v) for v in (r.loss_mlm, r.loss_xpos, r.loss_parse)),
                    repr(r.val_ppl), repr(r.lr), f"{r.seconds:.3f}",
                ])

    @classmethod
    def read_csv(cls, path) -> "RunLog":
        log = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = set(RUNLOG_FIELDS) - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"{path}: run log lacks columns {sorted(missing)}")
            for row in reader:
                def opt(key):
                    return float(row[key]) if row[key] else None
                log.append(EpochRecord(
                    int(row["epoch"]), opt("loss_mlm"), opt("loss_xpos"), opt("loss_parse"),
                    float(row["val_ppl"]), float(row["lr"]), float(row["seconds"]),
                ))
        if log.records:
            ppl = log.column("val_ppl")
            log.best_epoch = log.records[int(np.argmin(ppl))].epoch
        return log


def make_plan(config: PretrainConfig, data: PretrainData) -> TrainPlan:
    datasets = []
    for task in config.tasks:
        if task == MLM:
            datasets.append(data.train)
        elif task in (XPOS, PARSE):
            if not data.treebank:
                raise ValueError(f"task {task!r} needs a treebank")
            datasets.append(data.treebank)
        else:
            raise ValueError(f"unknown task {task!r}")
    return TrainPlan.from_ratio(
        config.tasks, datasets, config.ratio,
        batches_per_epoch=config.batches_per_epoch, batch_size=config.batch_size, seed=config.seed,
    )


@dataclass
class PretrainResult:
    model: MicroBERT
    log: RunLog
    checkpoint_dir: Optional[Path]
    best_checkpoint: Checkpoint


def pretrain(config: PretrainConfig, data: PretrainData, progress: bool = False) -> PretrainResult:
    """Train, validate every epoch, keep the lowest-perplexity model.

    With ``output_dir`` set, the best model is written to ``<output_dir>/best``
    whenever validation perplexity improves and the run log to
    ``<output_dir>/runlog.csv`` after every epoch.
    """
    if config.encoder.vocab_size != len(data.vocab):
        raise ValueError(f"config vocab_size {config.encoder.vocab_size} != vocabulary size {len(data.vocab)}")
    for s in data.train + data.validation + data.treebank:
        if len(s.ids) > config.encoder.max_positions:
            raise ValueError(f"sentence of {len(s.ids)} wordpieces exceeds max_positions; chunk it first")
    plan = make_plan(config, data)
    model = MicroBERT.create(config, data.vocab, data.xpos_inventory, data.deprel_inventory)
    optimizer = AdamW(model.params, lr=config.lr, betas=config.betas, eps=config.eps, weight_decay=config.weight_decay)
    schedule = PlateauSchedule(config.lr, config.plateau_patience, config.plateau_factor, config.min_lr)
    out_dir = Path(config.output_dir) if config.output_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    log = RunLog()
    best_ppl = math.inf
    best_ckpt: Optional[Checkpoint] = None
    since_best = 0
    for epoch in range(config.epochs):
        started = time.perf_counter()
        sums = {t: 0.0 for t in TASKS}
        counts = {t: 0 for t in TASKS}
        epoch_lr = optimizer.lr
        for position, desc in enumerate(build_epoch(plan, epoch)):
            sentences = materialize(plan, desc)
            rng = np.random.default_rng([config.seed, epoch, position, 1])
            bundle = model.losses(
                sentences, config.tasks, mask_seed=[config.seed, epoch, position],
                mask_rate=config.mask_rate, training=True, rng=rng,
            )
            total = aggregate(bundle)
            if not math.isfinite(total.item()):
                raise NonFiniteLossError(f"non-finite loss at {describe(desc, epoch, position)}")
            optimizer.zero_grad()
            total.backward()
            if config.clip_norm is not None:
                clip_grad_norm(model.params.values(), config.clip_norm)
            optimizer.step()
            for task, value in bundle.values().items():
                sums[task] += value
                counts[task] += 1

        ppl = validation_perplexity(
            model, data.validation, config.validation_seed, config.mask_rate, config.validation_batch_size,
        )
        new_lr = schedule.step(ppl)
        optimizer.set_lr(new_lr)
        record = EpochRecord(
            epoch,
            *(sums[t] / counts[t] if counts[t] else None for t in TASKS),
            val_ppl=ppl,
            lr=epoch_lr,
            seconds=time.perf_counter() - started,
        )
        log.append(record)
        improved = ppl < best_ppl
        if improved:
            best_ppl = ppl
            since_best = 0
            log.best_epoch = epoch
            best_ckpt = model.to_checkpoint(
                optimizer, config,
                {"epoch": epoch, "val_ppl": ppl, "validation_seed": config.validation_seed,
                 "plateau": {"lr": schedule.lr, "best": schedule.best, "bad_epochs": schedule.bad_epochs}},
            )
            if out_dir is not None:
                save_checkpoint(out_dir / "best", best_ckpt)
        else:
            since_best += 1
        if out_dir is not None:
            log.write_csv(out_dir / "runlog.csv")
        if progress:
            logger.info(
                "epoch %d mlm=%s xpos=%s parse=%s val_ppl=%.3f lr=%.2e (%.1fs)%s",
                epoch, _fmt(record.loss_mlm), _fmt(record.loss_xpos), _fmt(record.loss_parse),
                ppl, epoch_lr, record.seconds, " *" if improved else "",
            )
        if since_best >= config.early_stop_patience:
            log.stopped_early = True
            break

    assert best_ckpt is not None
    return PretrainResult(MicroBERT.from_checkpoint(best_ckpt), log, out_dir / "best" if out_dir else None, best_ckpt)


def _fmt(v: Optional[float]) -> str:
    return "-" if v is None else f"{v:.4f}"


def load_model(path) -> MicroBERT:
    return MicroBERT.from_checkpoint(load_checkpoint(path))

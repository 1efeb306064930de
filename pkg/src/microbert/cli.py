"""Command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

from .checkpoint import CheckpointError, load_checkpoint
from .corpus import (
    DataError,
    NerDataset,
    Treebank,
    read_conllu,
    read_unlabeled,
    read_wikiann,
    split_dataset,
)
from .encoder import PRESETS, count_parameters
from .heads import MLM, TASKS
from .pretrainer import PretrainConfig, RunLog, prepare_data, pretrain
from .tokenizer import Vocabulary, choose_vocab_size, count_unique_tokens, train_wordpiece

logger = logging.getLogger("microbert")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(kind: Callable) -> Callable:
    def parse(text: str):
        return None if text.strip().lower() in ("", "none", "auto") else kind(text)
    return parse


def _list(kind: Callable) -> Callable:
    def parse(text: str):
        return tuple(kind(x.strip()) for x in text.split(",") if x.strip())
    return parse


_EVAL_KEYS = {
    "epochs": (int, None),
    "batch_size": (int, None),
    "patience": (int, None),
    "batches_per_epoch": (_optional(int), None),
    "lr": (float, None),
    "encoder_lr": (_optional(float), None),
    "weight_decay": (float, None),
    "clip_norm": (float, None),
    "arc_dim": (int, None),
    "label_dim": (int, None),
    "lstm_layers": (_optional(int), None),
    "lstm_hidden": (_optional(int), None),
    "dropout": (_optional(float), None),
    "recurrent_dropout": (_optional(float), None),
    "highway": (_optional(_bool), None),
    "input_dropout": (_bool, None),
    "freeze_encoder": (_bool, None),
    "split": (_list(int), (8, 1, 1)),
}

# section -> key -> (parser, default); ``None`` defaults defer to the dataclass defaults
SCHEMA: dict[str, dict[str, tuple[Callable, object]]] = {
    "run": {"seed": (int, 0), "output_dir": (str, "run")},
    "paths": {
        "unlabeled": (str, None),
        "vocab": (str, None),
        "treebank": (str, None),
        "treebank_dev": (str, None),
        "treebank_test": (str, None),
        "ner": (str, None),
        "ner_dev": (str, None),
        "ner_test": (str, None),
    },
    "tokenizer": {"vocab_size": (_optional(int), None), "min_frequency": (int, 2)},
    "encoder": {
        "preset": (str, "micro"),
        "layers": (int, None),
        "hidden": (int, None),
        "heads": (int, None),
        "ffn": (int, None),
        "max_positions": (int, None),
        "dropout": (float, None),
        "attention_dropout": (float, None),
    },
    "plan": {
        "tasks": (_list(str), (MLM,)),
        "ratio": (_list(float), None),
        "batches_per_epoch": (int, 8000),
        "batch_size": (int, 32),
    },
    "optimizer": {
        "lr": (float, 3e-3),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
        "weight_decay": (float, 0.05),
        "clip_norm": (_optional(float), None),
    },
    "schedule": {
        "patience": (int, 2),
        "factor": (float, 0.5),
        "min_lr": (float, 5e-5),
        "epochs": (int, 200),
        "early_stop_patience": (int, 40),
    },
    "pretrain": {
        "mask_rate": (float, 0.15),
        "validation_fraction": (float, 0.1),
        "validation_seed": (int, 12345),
        "max_wordpieces": (int, 500),
        "arc_dim": (int, 100),
        "label_dim": (int, 100),
    },
    "eval-parse": dict(_EVAL_KEYS),
    "eval-ner": dict(_EVAL_KEYS),
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]]
    base_dir: Path

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    def path(self, key: str) -> Optional[Path]:
        value = self.values["paths"][key]
        if value is None:
            return None
        p = Path(value).expanduser()
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_dir(self) -> Path:
        p = Path(self.values["run"]["output_dir"]).expanduser()
        return p if p.is_absolute() else self.base_dir / p


def load_config(path: Optional[str]) -> RunConfig:
    """Parse a config file against SCHEMA; ``None`` gives all defaults."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    base = Path.cwd()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            parser.read(p, encoding="utf-8")
        except configparser.Error as exc:
            raise UsageError(f"{p}: {exc}") from None
        base = p.resolve().parent
    values: dict[str, dict[str, object]] = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise UsageError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise UsageError(f"{path}: unknown key {key!r} in section [{section}]")
            kind = SCHEMA[section][key][0]
            try:
                values[section][key] = kind(raw)
            except ValueError as exc:
                raise UsageError(f"{path}: [{section}] {key} = {raw!r}: {exc}") from None
    return RunConfig(values, base)


def encoder_config(cfg: RunConfig, vocab_size: int):
    enc = dict(cfg["encoder"])
    preset = enc.pop("preset")
    if preset not in PRESETS:
        raise UsageError(f"unknown encoder preset {preset!r}; expected one of {sorted(PRESETS)}")
    overrides = {k: v for k, v in enc.items() if v is not None}
    return PRESETS[preset](vocab_size, **overrides)


def pretrain_config(cfg: RunConfig, vocab_size: int, output_dir: Optional[Path]) -> PretrainConfig:
    plan, opt, sched, pre = cfg["plan"], cfg["optimizer"], cfg["schedule"], cfg["pretrain"]
    tasks = tuple(plan["tasks"])
    unknown = set(tasks) - set(TASKS)
    if unknown:
        raise UsageError(f"unknown tasks {sorted(unknown)}; expected a subset of {list(TASKS)}")
    ratio = plan["ratio"] if plan["ratio"] is not None else (1.0,) * len(tasks)
    try:
        return PretrainConfig(
            encoder=encoder_config(cfg, vocab_size),
            tasks=tasks,
            ratio=tuple(ratio),
            lr=opt["lr"],
            betas=(opt["beta1"], opt["beta2"]),
            eps=opt["eps"],
            weight_decay=opt["weight_decay"],
            plateau_patience=sched["patience"],
            plateau_factor=sched["factor"],
            min_lr=sched["min_lr"],
            epochs=sched["epochs"],
            batches_per_epoch=plan["batches_per_epoch"],
            batch_size=plan["batch_size"],
            early_stop_patience=sched["early_stop_patience"],
            mask_rate=pre["mask_rate"],
            clip_norm=opt["clip_norm"],
            arc_dim=pre["arc_dim"],
            label_dim=pre["label_dim"],
            seed=cfg["run"]["seed"],
            validation_seed=pre["validation_seed"],
            output_dir=None if output_dir is None else str(output_dir),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def eval_config(cfg: RunConfig, task: str):
    from .eval.finetune import EvalConfig

    section = dict(cfg[f"eval-{task}"])
    section.pop("split")
    kwargs = {k: v for k, v in section.items() if v is not None}
    try:
        return EvalConfig(task=task, seed=cfg["run"]["seed"], **kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# data loading helpers
# ---------------------------------------------------------------------------


def _require(cfg: RunConfig, key: str) -> Path:
    p = cfg.path(key)
    if p is None:
        raise UsageError(f"config needs [paths] {key}")
    if not p.exists():
        raise DataError(f"{p}: no such file")
    return p


def treebank_splits(cfg: RunConfig, seed: int) -> tuple[list, list, list, Treebank]:
    """Train/dev/test sentences: from three files, or one file split 8:1:1."""
    full = read_conllu(_require(cfg, "treebank"))
    dev_p, test_p = cfg.path("treebank_dev"), cfg.path("treebank_test")
    if dev_p is not None and test_p is not None:
        dev, test = read_conllu(dev_p).sentences, read_conllu(test_p).sentences
        train = full.sentences
    else:
        train, dev, test = split_dataset(full.sentences, cfg["eval-parse"]["split"], seed)
    everything = Treebank(list(train) + list(dev) + list(test))
    return list(train), list(dev), list(test), everything


def ner_splits(cfg: RunConfig, seed: int) -> NerDataset:
    full = read_wikiann(_require(cfg, "ner"))
    dev_p, test_p = cfg.path("ner_dev"), cfg.path("ner_test")
    if dev_p is not None and test_p is not None:
        return NerDataset(full, read_wikiann(dev_p), read_wikiann(test_p))
    train, dev, test = split_dataset(full, cfg["eval-ner"]["split"], seed)
    return NerDataset(list(train), list(dev), list(test))


def build_vocab(cfg: RunConfig, corpus) -> Vocabulary:
    if cfg.path("vocab") is not None:
        return Vocabulary.load(_require(cfg, "vocab"))
    words = [w for s in corpus.train_sentences() for w in s]
    size = cfg["tokenizer"]["vocab_size"] or choose_vocab_size(count_unique_tokens(words))
    return train_wordpiece(words, size, seed=cfg["run"]["seed"], min_frequency=cfg["tokenizer"]["min_frequency"])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _apply_overrides(cfg: RunConfig, args) -> None:
    if getattr(args, "seed", None) is not None:
        cfg["run"]["seed"] = args.seed
    if getattr(args, "out", None) is not None and args.command in ("pretrain", "train-tokenizer"):
        cfg["run"]["output_dir"] = str(Path(args.out).resolve())


def cmd_train_tokenizer(args) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    if args.input:
        cfg["paths"]["unlabeled"] = str(Path(args.input).resolve())
    if args.vocab_size:
        cfg["tokenizer"]["vocab_size"] = args.vocab_size
    corpus = read_unlabeled(_require(cfg, "unlabeled"), cfg["pretrain"]["validation_fraction"], cfg["run"]["seed"])
    cfg["paths"]["vocab"] = None
    vocab = build_vocab(cfg, corpus)
    out = Path(args.vocab_out) if args.vocab_out else cfg.output_dir / "vocab.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(out)
    print(f"wrote {len(vocab)} wordpieces to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    seed = cfg["run"]["seed"]
    corpus = read_unlabeled(_require(cfg, "unlabeled"), cfg["pretrain"]["validation_fraction"], seed)
    vocab = build_vocab(cfg, corpus)
    out = cfg.output_dir
    config = pretrain_config(cfg, len(vocab), out)
    treebank = None
    if set(config.tasks) - {MLM}:
        train, _, _, everything = treebank_splits(cfg, seed)
        treebank = Treebank(train, everything.xpos_inventory, everything.deprel_inventory)
    data = prepare_data(corpus, vocab, treebank, cfg["pretrain"]["max_wordpieces"])
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    (out / "pretrain_config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8")
    result = pretrain(config, data, progress=True)
    best = result.log.records[[r.epoch for r in result.log.records].index(result.log.best_epoch)]
    print(f"epochs run: {len(result.log)}; best epoch {best.epoch} val_ppl {best.val_ppl:.4f}")
    print(f"checkpoint: {result.checkpoint_dir}")
    print(f"run log: {out / 'runlog.csv'}")
    return EXIT_OK


def _cmd_eval(args, task: str) -> int:
    from .eval.finetune import finetune, prepare_ner_data, prepare_parse_data, write_report

    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    seed = cfg["run"]["seed"]
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except (CheckpointError, FileNotFoundError) as exc:
        raise DataError(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    config = eval_config(cfg, task)
    if task == "parse":
        train, dev, test, everything = treebank_splits(cfg, seed)
        data = prepare_parse_data(train, dev, test, ckpt.vocab, everything.deprel_inventory)
    else:
        ds = ner_splits(cfg, seed)
        data = prepare_ner_data(ds.train, ds.dev, ds.test, ckpt.vocab)
    result = finetune(config, ckpt, data, progress=True)
    rows = result.rows(task, seed)
    report = Path(args.report) if args.report else cfg.output_dir / f"{task}_report.csv"
    report.parent.mkdir(parents=True, exist_ok=True)
    write_report(rows, report)
    write_report(rows, report.with_suffix(".json"))
    for row in rows:
        print(f"{row['split']:5s} {row['metric']:9s} {row['value']:.2f}")
    print(f"report: {report}")
    return EXIT_OK


def cmd_eval_parse(args) -> int:
    return _cmd_eval(args, "parse")


def cmd_eval_ner(args) -> int:
    return _cmd_eval(args, "ner")


def aligned_curves(logs: Sequence[RunLog]) -> list[list]:
    """Rows of epoch followed by each run's validation perplexity (blank once a run has stopped)."""
    by_epoch = [{r.epoch: r.val_ppl for r in log.records} for log in logs]
    epochs = sorted(set().union(*by_epoch))
    return [[e] + [d.get(e, "") for d in by_epoch] for e in epochs]


def curves_svg(labels: Sequence[str], logs: Sequence[RunLog], width: int = 640, height: int = 400) -> str:
    """A minimal line chart of validation perplexity (log scale) per epoch."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    pad_l, pad_r, pad_t, pad_b = 60, 140, 20, 40
    pts = [(r.epoch, r.val_ppl) for log in logs for r in log.records]
    x_max = max(max(p[0] for p in pts), 1)
    y_lo = math.log(min(p[1] for p in pts))
    y_hi = math.log(max(p[1] for p in pts))
    if y_hi - y_lo < 1e-9:
        y_hi = y_lo + 1.0

    def sx(e):
        return pad_l + (width - pad_l - pad_r) * e / x_max

    def sy(v):
        return pad_t + (height - pad_t - pad_b) * (1 - (math.log(v) - y_lo) / (y_hi - y_lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad_l}" y1="{height - pad_b}" x2="{width - pad_r}" y2="{height - pad_b}" stroke="black"/>',
        f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{height - pad_b}" stroke="black"/>',
        f'<text x="{(width - pad_r + pad_l) / 2}" y="{height - 8}" text-anchor="middle">epoch</text>',
        f'<text x="14" y="{(height - pad_b + pad_t) / 2}" transform="rotate(-90 14 {(height - pad_b + pad_t) / 2})" '
        f'text-anchor="middle">validation MLM perplexity (log)</text>',
        f'<text x="{pad_l - 4}" y="{sy(math.exp(y_hi)) + 4:.1f}" text-anchor="end">{math.exp(y_hi):.1f}</text>',
        f'<text x="{pad_l - 4}" y="{sy(math.exp(y_lo)) + 4:.1f}" text-anchor="end">{math.exp(y_lo):.1f}</text>',
        f'<text x="{sx(x_max):.1f}" y="{height - pad_b + 14}" text-anchor="middle">{x_max}</text>',
    ]
    for k, (label, log) in enumerate(zip(labels, logs)):
        color = colors[k % len(colors)]
        coords = " ".join(f"{sx(r.epoch):.1f},{sy(r.val_ppl):.1f}" for r in log.records)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        y = pad_t + 16 * k + 10
        parts.append(f'<line x1="{width - pad_r + 10}" y1="{y}" x2="{width - pad_r + 30}" y2="{y}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width - pad_r + 35}" y="{y + 4}">{_escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def cmd_report(args) -> int:
    logs = []
    for path in args.runlog:
        p = Path(path)
        if not p.is_file():
            raise DataError(f"{p}: no such run log")
        try:
            logs.append(RunLog.read_csv(p))
        except (ValueError, KeyError) as exc:
            raise DataError(f"{p}: {exc}") from None
        if not logs[-1].records:
            raise DataError(f"{p}: run log has no epochs")
    labels = list(args.labels) if args.labels else [Path(p).parent.name or Path(p).stem for p in args.runlog]
    if len(labels) != len(logs):
        raise UsageError(f"{len(labels)} labels for {len(logs)} run logs")
    stem = Path(args.out)
    if stem.suffix in (".csv", ".svg"):
        stem = stem.with_suffix("")
    stem.parent.mkdir(parents=True, exist_ok=True)
    with stem.with_suffix(".csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch"] + [f"{label}_val_ppl" for label in labels])
        writer.writerows(aligned_curves(logs))
    stem.with_suffix(".svg").write_text(curves_svg(labels, logs), encoding="utf-8")
    for label, log in zip(labels, logs):
        last = log.records[-1]
        best = min(r.val_ppl for r in log.records)
        print(f"{label}: {len(log)} epochs, final val_ppl {last.val_ppl:.4f}, best {best:.4f}")
    print(f"wrote {stem.with_suffix('.csv')} and {stem.with_suffix('.svg')}")
    return EXIT_OK


def cmd_inspect_checkpoint(args) -> int:
    from .encoder import EncoderConfig

    try:
        ckpt = load_checkpoint(args.checkpoint)
    except (CheckpointError, FileNotFoundError) as exc:
        raise DataError(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    cfg = EncoderConfig.from_dict(ckpt.config["encoder"])
    tensors = ckpt.model_tensors()
    encoder_n = sum(v.size for k, v in tensors.items() if k.startswith("encoder."))
    heads_n = sum(v.size for k, v in tensors.items() if k.startswith("heads."))
    print(f"encoder: layers={cfg.layers} hidden={cfg.hidden} heads={cfg.heads} ffn={cfg.ffn} vocab={cfg.vocab_size}")
    print(f"tasks: {', '.join(ckpt.config.get('heads', {}).get('tasks', []))}")
    print(f"encoder parameters: {encoder_n} (closed form {count_parameters(cfg)})")
    print(f"head parameters: {heads_n}")
    print(f"total parameters: {encoder_n + heads_n}")
    for key in ("epoch", "val_ppl"):
        if key in ckpt.metadata:
            print(f"{key}: {ckpt.metadata[key]}")
    print(f"id: {ckpt.identity()}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="microbert", description="Pretrain and evaluate small multitask BERT encoders.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="key = value config file with [section] headers")
        p.add_argument("--seed", type=int, help="overrides [run] seed; controls all randomness")

    p = sub.add_parser("train-tokenizer", help="train a WordPiece vocabulary on unlabeled text")
    common(p)
    p.add_argument("--input", help="unlabeled text (overrides [paths] unlabeled)")
    p.add_argument("--vocab-size", type=int, help="vocabulary size (default: chosen from the corpus)")
    p.add_argument("--vocab-out", help="output file (default: <output_dir>/vocab.txt)")
    p.add_argument("--out", help="output directory (overrides [run] output_dir)")
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("pretrain", help="pretrain an encoder; writes <out>/best and <out>/runlog.csv")
    common(p, config_required=True)
    p.add_argument("--out", help="output directory (overrides [run] output_dir)")
    p.set_defaults(func=cmd_pretrain)

    for name, func, what in (("eval-parse", cmd_eval_parse, "dependency parsing (LAS/UAS)"),
                             ("eval-ner", cmd_eval_ner, "NER (span F1)")):
        p = sub.add_parser(name, help=f"fine-tune and score {what}")
        common(p, config_required=True)
        p.add_argument("--checkpoint", required=True, help="checkpoint directory")
        p.add_argument("--report", help="metrics CSV (a JSON copy is written alongside)")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="align validation perplexity curves of several runs")
    p.add_argument("--runlog", nargs="+", required=True, help="runlog.csv files")
    p.add_argument("--labels", nargs="+", help="one label per run log (default: parent directory names)")
    p.add_argument("--out", required=True, help="output stem; .csv and .svg are written")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint's configuration and parameter counts")
    p.add_argument("checkpoint", help="checkpoint directory")
    p.set_defaults(func=cmd_inspect_checkpoint)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        logger.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

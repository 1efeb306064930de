import csv
import re

import pytest

from microbert import synthetic
from microbert.checkpoint import load_checkpoint
from microbert.cli import SCHEMA, build_parser, load_config, run
from microbert.encoder import EncoderConfig, count_parameters

CONFIG = """\
[run]
seed = 3
output_dir = out

[paths]
unlabeled = data/unlabeled.txt
treebank = data/treebank.conllu
ner = data/ner.tsv

[tokenizer]
vocab_size = 300

[encoder]
layers = 1
hidden = 16
heads = 2
max_positions = 128

[plan]
tasks = mlm, xpos, parse
ratio = 8, 1, 1
batches_per_epoch = 4
batch_size = 4

[schedule]
epochs = 2

[pretrain]
arc_dim = 8
label_dim = 8

[eval-parse]
epochs = 1
batches_per_epoch = 2
batch_size = 4
lstm_layers = 1
lstm_hidden = 8
arc_dim = 8
label_dim = 8

[eval-ner]
epochs = 1
batch_size = 8
lstm_layers = 1
lstm_hidden = 8
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    synthetic.write_fixture(root / "data", unlabeled_tokens=2000, treebank_sentences=30, ner_sentences_count=30)
    (root / "run.cfg").write_text(CONFIG, encoding="utf-8")
    return root


@pytest.fixture(scope="module")
def pretrained(workspace):
    assert run(["pretrain", "--config", str(workspace / "run.cfg")]) == 0
    return workspace / "out"


def test_help_lists_every_flag(capsys):
    parser = build_parser()
    subparsers = next(a for a in parser._actions if a.dest == "command")
    for name, sub in subparsers.choices.items():
        assert run([name, "--help"]) == 0
        text = capsys.readouterr().out
        for action in sub._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)
    assert set(subparsers.choices) == {"train-tokenizer", "pretrain", "eval-parse", "eval-ner", "report", "inspect-checkpoint"}


def test_missing_config_is_usage_error(tmp_path, capsys):
    missing = tmp_path / "nope.cfg"
    assert run(["pretrain", "--config", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[encoder]\nwidth = 3\n")
    assert run(["pretrain", "--config", str(cfg)]) == 1
    cfg.write_text("[mystery]\nx = 1\n")
    assert run(["pretrain", "--config", str(cfg)]) == 1


def test_no_command_is_usage_error():
    assert run([]) == 1


def test_defaults_follow_recipe():
    cfg = load_config(None)
    assert cfg["optimizer"]["lr"] == 3e-3 and cfg["optimizer"]["weight_decay"] == 0.05
    assert cfg["plan"]["batches_per_epoch"] == 8000 and cfg["plan"]["batch_size"] == 32
    assert cfg["schedule"]["epochs"] == 200 and cfg["schedule"]["early_stop_patience"] == 40
    assert set(SCHEMA) >= {"run", "paths", "encoder", "plan", "eval-parse", "eval-ner"}


def test_bad_data_exit_code(tmp_path):
    (tmp_path / "tb.conllu").write_text("1\tw\t_\t_\tX\t_\t9\troot\t_\t_\n\n")
    (tmp_path / "u.txt").write_text("a b c\n\nd e f\n")
    (tmp_path / "c.cfg").write_text(
        "[paths]\nunlabeled = u.txt\ntreebank = tb.conllu\n[tokenizer]\nvocab_size = 30\n"
        "[plan]\ntasks = mlm, parse\n[encoder]\nlayers = 1\nhidden = 8\nheads = 2\n"
    )
    assert run(["pretrain", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path / "o")]) == 2


def test_train_tokenizer(workspace, tmp_path):
    out = tmp_path / "v.txt"
    assert run(["train-tokenizer", "--config", str(workspace / "run.cfg"), "--vocab-out", str(out)]) == 0
    assert len(out.read_text(encoding="utf-8").splitlines()) == 300


def test_pretrain_outputs(pretrained):
    assert (pretrained / "best" / "manifest.json").exists()
    rows = list(csv.DictReader((pretrained / "runlog.csv").open()))
    assert len(rows) == 2


def test_inspect_checkpoint_counts(pretrained, capsys):
    assert run(["inspect-checkpoint", str(pretrained / "best")]) == 0
    text = capsys.readouterr().out
    ckpt = load_checkpoint(pretrained / "best")
    cfg = EncoderConfig.from_dict(ckpt.config["encoder"])
    heads = sum(v.size for k, v in ckpt.tensors.items() if k.startswith("heads."))
    total = int(re.search(r"total parameters: (\d+)", text).group(1))
    assert total == count_parameters(cfg) + heads


def test_inspect_missing_checkpoint(tmp_path):
    assert run(["inspect-checkpoint", str(tmp_path)]) == 2


@pytest.mark.parametrize("command,metric", [("eval-parse", "las"), ("eval-ner", "f1")])
def test_eval_commands(workspace, pretrained, tmp_path, command, metric):
    report = tmp_path / "r.csv"
    args = [command, "--config", str(workspace / "run.cfg"), "--checkpoint", str(pretrained / "best"), "--report", str(report)]
    assert run(args) == 0
    rows = list(csv.DictReader(report.open()))
    assert {r["split"] for r in rows} == {"dev", "test"}
    assert metric in {r["metric"] for r in rows}
    assert (tmp_path / "r.json").exists()


def test_report_aligns_runs(pretrained, tmp_path, capsys):
    short = tmp_path / "short.csv"
    lines = (pretrained / "runlog.csv").read_text().splitlines()
    short.write_text("\n".join(lines[:2]) + "\n")
    out = tmp_path / "curves"
    assert run(["report", "--runlog", str(pretrained / "runlog.csv"), str(short), "--labels", "M", "MX", "--out", str(out)]) == 0
    rows = list(csv.reader((tmp_path / "curves.csv").open()))
    assert rows[0] == ["epoch", "M_val_ppl", "MX_val_ppl"]
    assert len(rows) == 3 and rows[2][2] == ""
    assert (tmp_path / "curves.svg").read_text().startswith("<svg")


def test_report_missing_log(tmp_path):
    assert run(["report", "--runlog", str(tmp_path / "x.csv"), "--out", str(tmp_path / "o")]) == 2

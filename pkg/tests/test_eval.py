import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from gradcheck import check_gradients
from oracles import brute_force_tree, enumerate_paths, enumerated_log_z
from microbert.checkpoint import Checkpoint
from microbert.encoder import Encoder, EncoderConfig
from microbert.eval.crf import bioul_constraints, crf_nll, log_partition, viterbi
from microbert.eval.finetune import (
    EvalConfig,
    build_model,
    finetune,
    prepare_ner_data,
    prepare_parse_data,
    write_report,
)
from microbert.eval.layers import BiLSTM, lstm_recurrence, scalar_mix
from microbert.eval.metrics import las_uas, span_f1
from microbert.eval.mst import decode_mst, is_tree, tree_score
from microbert.numerics import Tensor, ops
from microbert.numerics.autograd import ShapeError
from microbert import synthetic


def test_scalar_mix_equal_weights_is_mean():
    a, b = Tensor([[1.0, 2.0]]), Tensor([[3.0, 6.0]])
    out = scalar_mix([a, b], Tensor([0.0, 0.0]), Tensor([1.0]))
    np.testing.assert_allclose(out.data, [[2.0, 4.0]])


def test_scalar_mix_saturates_to_one_layer():
    a, b = Tensor([[1.0, 2.0]]), Tensor([[3.0, 6.0]])
    out = scalar_mix([a, b], Tensor([0.0, 80.0]), Tensor([1.0]))
    np.testing.assert_allclose(out.data, b.data, rtol=1e-6)


def test_scalar_mix_layer_count_checked():
    with pytest.raises(ShapeError):
        scalar_mix([Tensor([1.0])], Tensor([0.0, 0.0]), Tensor([1.0]))


def test_scalar_mix_gradient():
    rng = np.random.default_rng(0)
    layers = [Tensor(rng.standard_normal((2, 3))) for _ in range(4)]
    w = Tensor(rng.standard_normal(4), requires_grad=True)
    g = Tensor(np.array([1.3]), requires_grad=True)
    target = Tensor(rng.standard_normal((2, 3)))
    assert check_gradients(lambda: ops.sum(ops.tanh(scalar_mix(layers, w, g)) * target), [w, g]) <= 1e-4


def test_lstm_zero_weight_hand_trace():
    # zero input/recurrent weights, cell-candidate bias 1: i=f=o=1/2, g=tanh(1)
    h = 2
    xw = np.zeros((1, 2, 4 * h))
    xw[..., 2 * h:3 * h] = 1.0
    out = lstm_recurrence(Tensor(xw), Tensor(np.zeros((h, 4 * h)))).data[0]
    c1 = 0.5 * math.tanh(1.0)
    h1 = 0.5 * math.tanh(c1)
    c2 = 0.5 * c1 + 0.5 * math.tanh(1.0)
    np.testing.assert_allclose(out[0], [h1, h1])
    np.testing.assert_allclose(out[1], [0.5 * math.tanh(c2)] * 2)


def test_lstm_gates_at_sigmoid_zero():
    h = 3
    out = lstm_recurrence(Tensor(np.zeros((1, 1, 4 * h))), Tensor(np.zeros((h, 4 * h)))).data
    assert np.all(out == 0.0)
    assert expit(0.0) == 0.5


def test_bilstm_length_one_sees_same_input_both_ways():
    lstm = BiLSTM(4, 5, 1, seed=0)
    for part in ("weight", "recurrent", "bias"):
        lstm.params[f"lstm.l0.bwd.{part}"].data = lstm.params[f"lstm.l0.fwd.{part}"].data.copy()
    out = lstm(Tensor(np.random.default_rng(0).standard_normal((1, 1, 4))), np.array([1])).data
    np.testing.assert_allclose(out[0, 0, :5], out[0, 0, 5:])


def test_bilstm_shape_and_padding():
    lstm = BiLSTM(4, 5, 3, highway=True, seed=1)
    x = np.random.default_rng(1).standard_normal((2, 6, 4)).astype(np.float32)
    out = lstm(Tensor(x), np.array([6, 3])).data
    assert out.shape == (2, 6, 10)
    assert np.all(out[1, 3:] == 0)
    alone = lstm(Tensor(x[1:2, :3]), np.array([3])).data
    np.testing.assert_allclose(out[1, :3], alone[0], atol=1e-6)
    assert "lstm.l1.highway.weight" in lstm.params and "lstm.l0.highway.weight" not in lstm.params


def test_bilstm_gradient():
    lstm = BiLSTM(3, 2, 2, highway=True, seed=2)
    for p in lstm.params.values():
        p.data = p.data.astype(np.float64)
    x = Tensor(np.random.default_rng(2).standard_normal((2, 4, 3)), requires_grad=True)
    lengths = np.array([4, 2])
    target = Tensor(np.random.default_rng(3).standard_normal((2, 4, 4)))
    fn = lambda: ops.sum(lstm(x, lengths) * target)  # noqa: E731
    assert check_gradients(fn, [x, *lstm.params.values()]) <= 1e-4


def test_mst_dominant_case():
    s = np.full((3, 3), -5.0)
    s[1, 0] = 10.0
    s[2, 1] = 10.0
    heads, _ = decode_mst(s)
    assert heads.tolist() == [0, 1]


def test_mst_labels_at_chosen_arcs():
    s = np.zeros((3, 3))
    s[1, 0] = s[2, 1] = 5.0
    labels = np.zeros((3, 3, 2))
    labels[1, 0, 1] = 1.0
    labels[2, 1, 0] = 1.0
    heads, lab = decode_mst(s, labels)
    assert lab.tolist() == [1, 0]


@pytest.mark.parametrize("single_root", [True, False])
def test_mst_matches_brute_force(single_root):
    rng = np.random.default_rng(11)
    for _ in range(60):
        n = int(rng.integers(1, 5))
        s = rng.standard_normal((n + 1, n + 1)) * 3
        heads, _ = decode_mst(s, single_root=single_root)
        assert is_tree(heads, single_root)
        assert tree_score(s, heads) == pytest.approx(brute_force_tree(s, single_root)[0], abs=1e-9)


@given(st.integers(1, 12), st.integers(0, 10**6))
@settings(max_examples=100, deadline=None)
def test_mst_output_is_tree(n, seed):
    s = np.random.default_rng(seed).standard_normal((n + 1, n + 1))
    heads, _ = decode_mst(s)
    assert len(heads) == n and is_tree(heads)


def test_las_uas_examples():
    gold = [([0, 1, 1, 2, 2, 3, 3, 4, 4, 5], list("aaaaaaaaaa"))]
    heads = [0, 1, 1, 2, 2, 3, 3, 4, 9, 9]
    labels = list("aaaaaaabaa")
    las, uas = las_uas(gold, [(heads, labels)])
    assert (las, uas) == pytest.approx((70.0, 80.0))
    assert las_uas(gold, gold) == (100.0, 100.0)
    with pytest.raises(ValueError):
        las_uas(gold, [(heads[:-1], labels[:-1])])


@given(st.integers(0, 10**6))
@settings(max_examples=1000, deadline=None)
def test_las_never_exceeds_uas(seed):
    rng = np.random.default_rng(seed)
    sents = []
    for _ in range(int(rng.integers(1, 4))):
        n = int(rng.integers(1, 6))
        sents.append(((rng.integers(0, 3, n).tolist(), rng.integers(0, 2, n).tolist()),
                      (rng.integers(0, 3, n).tolist(), rng.integers(0, 2, n).tolist())))
    las, uas = las_uas([g for g, _ in sents], [p for _, p in sents])
    assert 0 <= las <= uas <= 100


def test_crf_single_position_example():
    e = Tensor([[2.0, 1.0]])
    t = Tensor(np.zeros((4, 4)))
    assert viterbi(e.data, t.data)[0] == [0]
    assert log_partition(e, t).item() == pytest.approx(math.log(math.e**2 + math.e), abs=1e-6)


def test_crf_small_enumeration_and_normalization():
    rng = np.random.default_rng(5)
    for _ in range(40):
        n, k = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        e = rng.standard_normal((n, k))
        t = rng.standard_normal((k + 2, k + 2))
        paths, scores = enumerate_paths(e, t)
        log_z = log_partition(Tensor(e), Tensor(t)).item()
        assert log_z == pytest.approx(enumerated_log_z(e, t), abs=1e-9)
        path, best = viterbi(e, t)
        assert best == pytest.approx(scores.max(), abs=1e-9)
        assert np.exp(scores - log_z).sum() == pytest.approx(1.0, abs=1e-9)
        nll = crf_nll(Tensor(e), Tensor(t), paths[0]).item()
        assert 0 < math.exp(-nll) <= 1 + 1e-12


def test_crf_constraints_forbid_invalid_bioul():
    tags = ["O", "B-PER", "I-PER", "L-PER", "U-PER"]
    c = bioul_constraints(tags)
    e = np.zeros((3, 5))
    e[0, 2] = 10.0  # I-PER cannot start a sequence
    path, _ = viterbi(e, np.zeros((7, 7)), c)
    assert tags[path[0]] != "I-PER"
    from microbert.corpus import is_valid_bioul

    rng = np.random.default_rng(0)
    for _ in range(50):
        path, _ = viterbi(rng.standard_normal((5, 5)) * 4, rng.standard_normal((7, 7)), c)
        assert is_valid_bioul([tags[i] for i in path])


def test_crf_nll_gradient():
    rng = np.random.default_rng(6)
    e = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    t = Tensor(rng.standard_normal((5, 5)), requires_grad=True)
    assert check_gradients(lambda: crf_nll(e, t, [0, 2, 1, 1]), [e, t]) <= 1e-4


def test_span_f1_examples():
    assert span_f1([["O", "B-PER", "L-PER"]], [["O", "B-PER", "L-PER"]])[2] == 100.0
    p, r, f = span_f1([["U-PER", "O", "U-LOC"]], [["U-PER", "O", "O"]])
    assert (p, r) == (100.0, 50.0)
    assert f == pytest.approx(200 / 3)
    assert span_f1([["O"]], [["O"]]) == (0.0, 0.0, 0.0)


def test_span_f1_repairs_stray_tags():
    # a lone L- is read as a unit chunk
    assert span_f1([["U-PER"]], [["L-PER"]])[2] == 100.0


@given(st.permutations(list(range(4))))
def test_span_f1_order_invariant(order):
    gold = [["U-PER", "O"], ["B-LOC", "L-LOC"], ["O", "U-ORG"], ["U-PER", "U-PER"]]
    pred = [["U-PER", "O"], ["U-LOC", "O"], ["O", "U-ORG"], ["B-PER", "L-PER"]]
    assert span_f1([gold[i] for i in order], [pred[i] for i in order]) == pytest.approx(span_f1(gold, pred))


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


def make_checkpoint(vocab, seed=0):
    cfg = EncoderConfig(layers=1, hidden=16, heads=2, vocab_size=len(vocab), max_positions=64)
    enc = Encoder(cfg, seed=seed)
    return Checkpoint({"encoder": cfg.to_dict()}, vocab, {k: v.data for k, v in enc.params.items()})


def small_eval(task, **kw):
    base = dict(task=task, epochs=2, batches_per_epoch=2, batch_size=4, lstm_layers=1, lstm_hidden=8, arc_dim=8, label_dim=8)
    base.update(kw)
    return EvalConfig(**base)


def test_eval_defaults():
    p, n = EvalConfig(task="parse"), EvalConfig(task="ner")
    assert (p.epochs, p.batch_size, p.patience, p.lr, p.clip_norm) == (300, 16, 50, 1e-3, 5.0)
    assert (p.batches_per_epoch, p.encoder_lr, p.lstm_layers, p.lstm_hidden, p.highway) == (200, 5e-5, 3, 400, True)
    assert (p.arc_dim, p.label_dim, p.recurrent_dropout) == (100, 100, 0.3)
    assert (n.batches_per_epoch, n.encoder_lr, n.lstm_layers, n.lstm_hidden, n.dropout) == (None, 1e-5, 2, 200, 0.5)


@pytest.fixture(scope="module")
def parse_data(toy_vocab, toy_treebank):
    s = toy_treebank.sentences
    return prepare_parse_data(s[:20], s[20:30], s[30:], toy_vocab)


@pytest.fixture(scope="module")
def ner_data(toy_vocab):
    s = synthetic.ner_sentences(30, seed=3)
    return prepare_ner_data(s[:20], s[20:25], s[25:], toy_vocab)


def test_frozen_encoder_has_fewer_trainable_parameters(toy_vocab, parse_data):
    ckpt = make_checkpoint(toy_vocab)
    full = build_model(small_eval("parse"), ckpt, parse_data)
    frozen = build_model(small_eval("parse", freeze_encoder=True), ckpt, parse_data)
    count = lambda m: sum(p.size for p in m.trainable_params().values())  # noqa: E731
    assert count(frozen) < count(full)


def test_vocabulary_mismatch_rejected(toy_vocab, parse_data):
    from microbert.tokenizer import train_wordpiece

    other = train_wordpiece(["xyz", "zyx"] * 3, 20)
    with pytest.raises(ValueError, match="vocabulary"):
        build_model(small_eval("parse"), make_checkpoint(other), parse_data)


@pytest.mark.parametrize("task", ["parse", "ner"])
def test_finetune_is_deterministic(task, toy_vocab, parse_data, ner_data):
    data = parse_data if task == "parse" else ner_data
    ckpt = make_checkpoint(toy_vocab)
    a = finetune(small_eval(task), ckpt, data)
    b = finetune(small_eval(task), ckpt, data)
    assert a.metrics == b.metrics
    assert set(a.metrics) == {"dev", "test"}
    assert a.checkpoint_id == ckpt.identity()


def test_finetune_frozen_encoder_leaves_encoder_untouched(toy_vocab, parse_data):
    ckpt = make_checkpoint(toy_vocab)
    result = finetune(small_eval("parse", freeze_encoder=True), ckpt, parse_data)
    for name, p in result.model.encoder.params.items():
        np.testing.assert_array_equal(p.data, ckpt.tensors[name])


def test_report_formats(tmp_path):
    rows = [{"task": "parse", "split": "test", "metric": "las", "value": 50.0, "seed": 0, "checkpoint": "abc"}]
    write_report(rows, tmp_path / "r.csv")
    write_report(rows, tmp_path / "r.json")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "task,split,metric,value,seed,checkpoint"
    import json

    assert json.loads((tmp_path / "r.json").read_text()) == rows

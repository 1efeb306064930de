import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microbert.encoder import Encoder, EncoderConfig, collate
from microbert.heads import (
    ACTION_KEEP,
    ACTION_MASK,
    LossBundle,
    PretrainingHeads,
    aggregate,
    arc_loss,
    biaffine_arc,
    make_mask_plan,
    mlm_loss,
    xpos_loss,
)
from microbert.numerics import Tensor, ops
from microbert.tokenizer import MASK_ID, EncodedSentence

XPOS_TAGS = ["NN", "VB", "JJ"]
DEPRELS = ["root", "nsubj", "obj"]


def sentence(widths, xpos=None, heads=None, deprels=None, first=5):
    spans, pos, ids = [], 1, [2]
    for w in widths:
        spans.append((pos, pos + w))
        ids.extend(range(first, first + w))
        first += w
        pos += w
    ids.append(3)
    words = tuple(f"w{i}" for i in range(len(widths)))
    return EncodedSentence(
        words=words, normalized=words, ids=np.array(ids), spans=np.array(spans), has_specials=True,
        xpos=xpos, heads=heads, deprels=deprels,
    )


def zeros(*shape):
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def test_mask_action_covers_whole_word():
    s = sentence([3])
    for seed in range(200):
        plan = make_mask_plan(s, rate=1.0, seed=seed, vocab_size=50)
        if plan.actions[0] == ACTION_MASK:
            assert plan.apply(s.ids)[1:4].tolist() == [MASK_ID] * 3
            return
    pytest.fail("no MASK action drawn")


def test_rate_zero_still_selects_one_word():
    plan = make_mask_plan(sentence([2]), rate=0.0, seed=7, vocab_size=50)
    assert plan.word_indices.tolist() == [0]


def test_mask_plan_is_deterministic():
    s = sentence([1, 2, 3, 1, 1])
    a = make_mask_plan(s, 0.5, seed=[1, 2], vocab_size=50)
    b = make_mask_plan(s, 0.5, seed=[1, 2], vocab_size=50)
    assert a.positions.tolist() == b.positions.tolist()
    assert a.replacements.tolist() == b.replacements.tolist()


@given(st.lists(st.integers(1, 4), min_size=1, max_size=15), st.integers(0, 10**6))
@settings(max_examples=200, deadline=None)
def test_mask_atomicity(widths, seed):
    s = sentence(widths)
    plan = make_mask_plan(s, 0.15, seed=seed, vocab_size=60)
    covered = set(plan.positions.tolist())
    for start, end in s.spans:
        inside = {p for p in range(start, end) if p in covered}
        assert not inside or len(inside) == end - start
    assert all(r == MASK_ID or r >= 5 for r in plan.replacements)


def _mlm_case(vocab, h, t, positions):
    s = sentence([1] * (t - 2))
    batch = collate([s])
    from microbert.encoder import EncoderOutput

    hidden = Tensor(np.random.default_rng(0).standard_normal((1, t, h)).astype(np.float32))
    out = EncoderOutput([hidden], batch, batch.ids)
    plan = make_mask_plan(s, 0.0, seed=0, vocab_size=vocab)
    plan.positions = np.array(positions)
    plan.replacements = np.full(len(positions), MASK_ID)
    return s, out, plan


def test_mlm_uniform_loss_is_log_vocab():
    s, out, plan = _mlm_case(4, 3, 4, [1])
    loss = mlm_loss(out, [plan], np.array([[2, 1, 0, 3]]), Tensor(np.zeros((4, 3))), Tensor(np.zeros(4)))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-6)


def test_mlm_matches_manual_and_ignores_unmasked_gold():
    rng = np.random.default_rng(3)
    s, out, plan = _mlm_case(12, 5, 6, [1, 3])
    emb = Tensor(rng.standard_normal((12, 5)).astype(np.float32))
    bias = Tensor(rng.standard_normal(12).astype(np.float32))
    gold = np.array([[2, 7, 8, 9, 10, 3]])
    loss = mlm_loss(out, [plan], gold, emb, bias).item()
    logits = out.last.data[0, [1, 3]] @ emb.data.T + bias.data
    logp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    assert loss == pytest.approx(-(logp[0, 7] + logp[1, 9]) / 2, rel=1e-5)
    other = gold.copy()
    other[0, [2, 4]] = [0, 1]
    assert mlm_loss(out, [plan], other, emb, bias).item() == loss


def test_mlm_empty_plan_rejected():
    s, out, plan = _mlm_case(4, 3, 4, [])
    with pytest.raises(ValueError):
        mlm_loss(out, [plan], np.zeros((1, 4), dtype=int), Tensor(np.zeros((4, 3))), Tensor(np.zeros(4)))


def test_mlm_perfect_logits_loss_vanishes():
    s, out, plan = _mlm_case(4, 3, 4, [1])
    out.hidden_states[-1] = Tensor(np.zeros((1, 4, 3), dtype=np.float32))
    bias = np.full(4, -50.0, dtype=np.float32)
    bias[1] = 50.0
    loss = mlm_loss(out, [plan], np.array([[2, 1, 0, 3]]), Tensor(np.zeros((4, 3))), Tensor(bias))
    assert loss.item() < 1e-6


def test_xpos_uniform_and_margin():
    pooled = Tensor(np.zeros((1, 3, 4), dtype=np.float32))
    mask = np.ones((1, 3), dtype=bool)
    gold = np.array([[0, 5, 16]])
    loss = xpos_loss(pooled, mask, gold, Tensor(np.zeros((4, 17))), Tensor(np.zeros(17)))
    assert loss.item() == pytest.approx(math.log(17), abs=1e-5)
    bias = Tensor(np.array([1.0, 0.0], dtype=np.float32))
    loss2 = xpos_loss(pooled, mask, np.zeros((1, 3), dtype=int), Tensor(np.zeros((4, 2))), bias)
    assert loss2.item() < math.log(2)


def test_xpos_outside_inventory_rejected():
    heads = PretrainingHeads(["mlm", "xpos"], 8, 30, xpos_inventory=XPOS_TAGS)
    enc = Encoder(EncoderConfig(layers=1, hidden=8, heads=2, vocab_size=30, max_positions=16))
    out = enc(collate([sentence([1, 1], xpos=("NN", "ZZ"))]))
    with pytest.raises(ValueError, match="ZZ"):
        heads.xpos(out)


def test_biaffine_toy_value():
    s = biaffine_arc(Tensor([[3.0]]), Tensor([[2.0]]), Tensor([[1.0]]), Tensor([0.5]))
    assert s.data[0, 0] == pytest.approx(7.5)


def test_zero_parameters_give_uniform_heads():
    rng = np.random.default_rng(0)
    rep = Tensor(rng.standard_normal((1, 5, 6)).astype(np.float32))
    scores = biaffine_arc(rep, rep, Tensor(np.zeros((6, 6))), Tensor(np.zeros(6)))
    assert scores.shape == (1, 5, 5)
    assert np.all(scores.data == 0)
    loss = arc_loss(scores, np.ones((1, 4), dtype=bool), np.array([[0, 1, 1, 2]]))
    assert loss.item() == pytest.approx(math.log(5), abs=1e-6)


def test_arc_loss_ignores_padding_candidates():
    scores = Tensor(np.zeros((1, 5, 5), dtype=np.float32))
    mask = np.array([[True, True, False, False]])
    loss = arc_loss(scores, mask, np.array([[0, 1, 0, 0]]))
    assert loss.item() == pytest.approx(math.log(3), abs=1e-6)


def test_aggregate_examples():
    b = LossBundle()
    b["mlm"] = Tensor(1.0)
    assert aggregate(b).item() == 1.0
    b["xpos"] = Tensor(0.5)
    b["parse"] = Tensor(0.25)
    assert aggregate(b).item() == 1.75
    with pytest.raises(ValueError):
        aggregate(LossBundle())


def test_aggregate_gradient_is_sum_of_parts():
    cfg = EncoderConfig(layers=1, hidden=8, heads=2, vocab_size=40, max_positions=16, dropout=0.0, attention_dropout=0.0)
    enc = Encoder(cfg, seed=1)
    heads = PretrainingHeads(["mlm", "xpos", "parse"], 8, 40, XPOS_TAGS, DEPRELS, arc_dim=4, label_dim=4, seed=2)
    s = sentence([1, 2, 1], xpos=("NN", "VB", "JJ"), heads=(2, 0, 2), deprels=("nsubj", "root", "obj"))
    batch = collate([s])
    plan = make_mask_plan(s, 0.5, seed=1, vocab_size=40)
    params = {**enc.params, **heads.params}

    def losses():
        masked = enc(batch, mask_plans=[plan])
        plain = enc(batch)
        return {
            "mlm": heads.mlm(masked, [plan], enc.params["encoder.embeddings.word.weight"]),
            "xpos": heads.xpos(plain),
            "parse": heads.parse(plain),
        }

    def grads_of(task=None):
        for p in params.values():
            p.grad = None
        parts = losses()
        bundle = LossBundle(parts if task is None else {task: parts[task]})
        aggregate(bundle).backward()
        return {n: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for n, p in params.items()}

    total = grads_of()
    separate = [grads_of(t) for t in ("mlm", "xpos", "parse")]
    for name in params:
        np.testing.assert_allclose(total[name], sum(g[name] for g in separate), atol=1e-6)
    assert np.any(total["heads.parse.arc.weight"] != 0)
    assert np.any(total["encoder.layer0.ffn.in.weight"] != 0)
    assert all(v >= 0 and np.isfinite(v) for v in LossBundle(losses()).values().values())

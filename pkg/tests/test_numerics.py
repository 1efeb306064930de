import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_gradients
from microbert.numerics import (
    AdamW,
    NonFiniteGradientError,
    PlateauSchedule,
    ShapeError,
    Tensor,
    adamw_update,
    clip_gradients,
    ops,
    value_and_grad,
)


def t64(rng, *shape):
    return Tensor(rng.standard_normal(shape).astype(np.float64), requires_grad=True)


def test_cross_entropy_symmetric_two_class():
    logits = Tensor(np.zeros((1, 2), dtype=np.float32))
    loss, (g,) = value_and_grad(lambda x: ops.cross_entropy(x, [0]), logits)
    assert loss.item() == pytest.approx(math.log(2), abs=1e-6)
    np.testing.assert_allclose(g, [[-0.5, 0.5]], atol=1e-7)


def test_layer_norm_constant_row_is_zero():
    x = Tensor(np.full((2, 7), 3.25, dtype=np.float32))
    out = ops.layer_norm(x, Tensor(np.ones(7)), Tensor(np.zeros(7)))
    assert np.all(out.data == 0.0)


def test_tensor_defaults_to_32_bit():
    assert Tensor([1.0, 2.0]).dtype == np.float32


def test_shape_mismatch_names_the_op():
    with pytest.raises(ShapeError, match="matmul"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_non_scalar_backward_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_dropout_needs_rng_and_is_inverted():
    x = Tensor(np.ones((200, 50)))
    with pytest.raises(ValueError):
        ops.dropout(x, 0.5, None)
    y = ops.dropout(x, 0.5, np.random.default_rng(0))
    assert set(np.unique(y.data)) <= {0.0, 2.0}
    assert ops.dropout(x, 0.5, None, training=False) is x


def test_adamw_first_step_example():
    p, m, v = adamw_update(np.array(1.0), np.array(1.0), np.array(0.0), np.array(0.0), 1, 0.1, weight_decay=0.0)
    assert float(p) == pytest.approx(0.9, abs=1e-7)


def test_adamw_zero_grad_identity():
    p, m, v = adamw_update(np.array([1.5, -2.0]), np.zeros(2), np.zeros(2), np.zeros(2), 1, 0.1)
    np.testing.assert_array_equal(p, [1.5, -2.0])
    np.testing.assert_array_equal(m, 0)
    np.testing.assert_array_equal(v, 0)


def test_adamw_decoupled_decay():
    p, _, _ = adamw_update(np.array(2.0), np.array(0.0), np.array(0.0), np.array(0.0), 1, 0.1, weight_decay=0.05)
    assert float(p) == pytest.approx(2.0 * 0.995, rel=1e-12)


def test_adamw_rejects_nonfinite_and_keeps_state():
    w = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    opt = AdamW({"w": w}, lr=0.1)
    w.grad = np.array([1.0, np.nan, 0.0], dtype=np.float32)
    with pytest.raises(NonFiniteGradientError):
        opt.step()
    assert opt.state.t == 0
    np.testing.assert_array_equal(w.data, 1.0)
    w.grad = np.ones(3, dtype=np.float32)
    opt.step()
    opt.step()
    assert opt.state.t == 2
    assert opt.state.m["w"].shape == w.shape


def test_adamw_skips_decay_for_bias():
    w = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    b = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    opt = AdamW({"x.weight": w, "x.bias": b}, lr=0.1, weight_decay=0.5)
    w.grad = np.zeros(2, dtype=np.float32)
    b.grad = np.zeros(2, dtype=np.float32)
    opt.step()
    np.testing.assert_allclose(w.data, 0.95)
    np.testing.assert_array_equal(b.data, 1.0)


def test_clip_examples():
    (g,) = clip_gradients([np.array([6.0, 8.0])], 5.0)
    np.testing.assert_allclose(g, [3.0, 4.0])
    (g,) = clip_gradients([np.array([0.0, 4.0])], 5.0)
    np.testing.assert_array_equal(g, [0.0, 4.0])


@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.floats(0.1, 10.0), st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_clip_multi_tensor_matches_concatenation(sizes, max_norm, seed):
    rng = np.random.default_rng(seed)
    grads = [rng.standard_normal(n) * 3 for n in sizes]
    clipped = np.concatenate(clip_gradients(grads, max_norm))
    (joined,) = clip_gradients([np.concatenate(grads)], max_norm)
    np.testing.assert_allclose(clipped, joined, rtol=1e-12)


def test_plateau_examples():
    s = PlateauSchedule(lr=3e-3, patience=2)
    lrs = [s.step(m) for m in (10, 10, 10)]
    assert lrs[:2] == [3e-3, 3e-3]
    assert lrs[2] == pytest.approx(1.5e-3)

    s = PlateauSchedule(lr=3e-3, patience=2)
    assert all(s.step(m) == 3e-3 for m in np.linspace(10, 1, 20))

    s = PlateauSchedule(lr=1e-4, patience=2, min_lr=5e-5)
    lrs = [s.step(1.0) for _ in range(20)]
    assert min(lrs) == pytest.approx(5e-5)
    assert all(lr >= 5e-5 for lr in lrs)


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=40), st.integers(1, 4), st.floats(0.1, 0.9))
@settings(max_examples=100, deadline=None)
def test_plateau_monotone_and_floored(metrics, patience, factor):
    s = PlateauSchedule(lr=3e-3, patience=patience, factor=factor, min_lr=5e-5)
    lrs = [s.step(m) for m in metrics]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert all(lr >= 5e-5 for lr in lrs)


@given(st.integers(1, 6), st.integers(1, 30), st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).standard_normal((rows, cols)) * 50
    p = ops.softmax(Tensor(x.astype(np.float32))).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)


def test_logsumexp_overflow_safe():
    x = Tensor(np.array([[1e4, 1e4], [-1e4, -1e4]]))
    out = ops.logsumexp(x).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1e4 + math.log(2), -1e4 + math.log(2)])


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 6)).astype(np.float32)
    w = rng.standard_normal((6, 3)).astype(np.float32)

    def run():
        return ops.gelu(ops.matmul(Tensor(x), Tensor(w))).data

    assert run().tobytes() == run().tobytes()


@pytest.mark.parametrize("seed", range(5))
def test_composite_gradient(seed):
    rng = np.random.default_rng(seed)
    x, w = t64(rng, 3, 4), t64(rng, 4, 5)
    g, b = t64(rng, 5), t64(rng, 5)

    def fn():
        h = ops.layer_norm(ops.tanh(ops.matmul(x, w)), g, b)
        return ops.cross_entropy(ops.gelu(h), [0, 4, 2])

    assert check_gradients(fn, [x, w, g, b]) <= 1e-4

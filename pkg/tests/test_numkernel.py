import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from modalign import numkernel as nk

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def mat(shape, seed=0):
    return torch.tensor(np.random.default_rng(seed).normal(size=shape), dtype=torch.float64)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    s = nk.softmax(torch.tensor(x))
    assert torch.allclose(s.sum(-1), torch.ones(x.shape[0], dtype=torch.float64), atol=1e-6)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 9)), elements=finite))
def test_layer_norm_rows_standardized(x):
    x = x + np.arange(x.shape[1])  # avoid constant rows
    y = nk.layer_norm(torch.tensor(x))
    assert torch.allclose(y.mean(-1), torch.zeros(x.shape[0], dtype=torch.float64), atol=1e-6)
    var = y.var(-1, unbiased=False)
    # eps in the denominator shrinks the variance of nearly-constant rows a little
    raw = torch.tensor(x).var(-1, unbiased=False)
    expected = raw / (raw + 1e-5)
    assert torch.allclose(var, expected, atol=1e-6)


def test_cross_entropy_of_one_hot_prediction_is_zero():
    logits = torch.full((3, 5), float("-inf"), dtype=torch.float64)
    targets = torch.tensor([0, 3, 4])
    logits[torch.arange(3), targets] = 0.0
    assert nk.cross_entropy(logits, targets).item() == 0.0


def test_cross_entropy_weights_select_positions():
    logits = mat((4, 6))
    t = torch.tensor([1, 2, 3, 4])
    w = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
    full = -nk.log_softmax(logits)[torch.arange(4), t]
    assert torch.isclose(nk.cross_entropy(logits, t, w), (full[0] + full[2]) / 2)


@pytest.mark.parametrize("op,args", [
    ("matmul", ((2, 3), (4, 5))),
    ("linear", ((2, 3), (4, 5))),
    ("concat", ((2, 3), (2, 4))),
])
def test_shape_mismatch_names_op_and_shapes(op, args):
    a, b = (torch.zeros(s, dtype=torch.float64) for s in args)
    with pytest.raises(nk.ShapeError) as e:
        getattr(nk, op)([a, b]) if op == "concat" else getattr(nk, op)(a, b)
    msg = str(e.value)
    assert op in msg and str(tuple(args[0])) in msg and str(tuple(args[1])) in msg


def test_layer_norm_gamma_shape_checked():
    with pytest.raises(nk.ShapeError, match="layer_norm"):
        nk.layer_norm(torch.zeros(2, 4), torch.ones(3))


def test_embedding_rejects_out_of_range():
    with pytest.raises(nk.ShapeError, match="embedding"):
        nk.embedding(torch.zeros(4, 2), [0, 4])


def test_attention_mask_blocks_positions():
    q, k, v = mat((1, 2, 3), 1), mat((1, 3, 3), 2), mat((1, 3, 3), 3)
    mask = torch.tensor([True, False, True])
    out = nk.attention(q, k, v, mask)
    k2, v2 = k.clone(), v.clone()
    k2[:, 1] += 5.0
    v2[:, 1] -= 7.0
    assert torch.equal(out, nk.attention(q, k2, v2, mask))


def test_forward_ops_bitwise_deterministic():
    x, w = mat((5, 8), 4), mat((8, 8), 5)
    a = nk.gelu(nk.layer_norm(nk.linear(x, w)))
    b = nk.gelu(nk.layer_norm(nk.linear(x, w)))
    assert torch.equal(a, b)


# ---------------------------------------------------------------------------
# gradient checks


def test_grad_check_linear_is_exact():
    c = mat((6,), 1)
    w = mat((6,), 2)
    assert nk.grad_check(lambda: (c * w).sum(), [w]) < 1e-9


def test_grad_check_ce_softmax_matmul():
    x = mat((5, 3), 3)
    w = mat((3, 4), 4)
    t = torch.tensor([0, 1, 2, 3, 1])
    assert nk.grad_check(lambda: nk.cross_entropy(nk.matmul(x, w), t), [w]) < 1e-4


def test_grad_check_layer_norm_gelu_chain():
    x = mat((2, 8), 5)
    g, b = mat((8,), 6), mat((8,), 7)
    assert nk.grad_check(lambda: nk.gelu(nk.layer_norm(x, g, b)).pow(2).sum(), [x, g, b]) < 1e-4


def test_grad_check_reports_non_finite():
    w = torch.tensor([1.0, -1.0], dtype=torch.float64)
    with pytest.raises(nk.NonFiniteError):
        nk.grad_check(lambda: torch.log(w).sum(), [w])


def test_grad_check_eps_range():
    with pytest.raises(ValueError):
        nk.grad_check(lambda: torch.zeros(()), [], eps=0.1)


# ---------------------------------------------------------------------------
# optimizer


def test_adamw_zero_grad_is_pure_decay():
    p = {"w": mat((3, 3), 1)}
    before = p["w"].clone()
    st_ = nk.OptimizerState(weight_decay=0.05)
    nk.adamw_step(st_, p, {"w": torch.zeros(3, 3, dtype=torch.float64)}, lr=0.1)
    assert torch.equal(p["w"], before * (1 - 0.1 * 0.05))


def test_adamw_single_step_hand_computed():
    p = {"w": torch.tensor([1.0], dtype=torch.float64)}
    st_ = nk.OptimizerState(beta1=0.9, beta2=0.999, weight_decay=0.0)
    nk.adamw_step(st_, p, {"w": torch.tensor([0.5], dtype=torch.float64)}, lr=0.1)
    m_hat = 0.05 / (1 - 0.9)
    v_hat = 0.00025 / (1 - 0.999)
    expected = 1.0 - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert st_.t == 1
    assert p["w"].item() == pytest.approx(expected, abs=1e-15)


def test_adamw_default_hyperparameters():
    st_ = nk.OptimizerState()
    assert (st_.beta1, st_.beta2, st_.weight_decay, st_.eps) == (0.9, 0.999, 0.05, 1e-8)


@given(st.integers(0, 2 ** 31 - 1))
def test_adamw_identity_without_grad_or_decay(seed):
    p = {"w": mat((4,), seed % 1000)}
    before = p["w"].clone()
    nk.adamw_step(nk.OptimizerState(weight_decay=0.0), p, {"w": torch.zeros(4, dtype=torch.float64)}, 0.3)
    assert torch.equal(p["w"], before)


def test_adamw_non_finite_grad_aborts_before_mutation():
    p = {"a": mat((2,), 1), "b": mat((2,), 2)}
    before = {k: v.clone() for k, v in p.items()}
    st_ = nk.OptimizerState()
    g = {"a": torch.ones(2, dtype=torch.float64), "b": torch.tensor([1.0, float("nan")], dtype=torch.float64)}
    with pytest.raises(nk.NonFiniteError, match="'b'"):
        nk.adamw_step(st_, p, g, 0.1)
    assert st_.t == 0
    assert all(torch.equal(p[k], before[k]) for k in p)


def test_adamw_step_counter_and_moment_shapes():
    p = {"w": mat((2, 3), 1)}
    st_ = nk.OptimizerState()
    for i in range(3):
        nk.adamw_step(st_, p, {"w": mat((2, 3), i + 5)}, 0.01)
        assert st_.t == i + 1
    assert st_.m["w"].shape == st_.v["w"].shape == p["w"].shape


# ---------------------------------------------------------------------------
# schedule


def test_lr_reference_points():
    assert abs(nk.lr_at_step(0, 1000, 1e-5, 1e-8, 10000) - 1e-8) < 1e-12
    assert abs(nk.lr_at_step(1000, 1000, 1e-5, 1e-8, 10000) - 1e-5) < 1e-12
    assert abs(nk.lr_at_step(10000, 1000, 1e-5, 1e-8, 10000)) < 1e-12


def test_lr_cosine_midpoint_is_half_peak():
    assert nk.lr_at_step(2000, 1000, 1e-5, 1e-8, 3000) == pytest.approx(5e-6, abs=1e-15)


@given(st.integers(1, 500), st.integers(1, 500))
def test_lr_continuous_at_warmup_boundary(warmup, extra):
    total = warmup + extra
    at = nk.lr_at_step(warmup, warmup, 1e-3, 1e-8, total)
    before = nk.lr_at_step(warmup - 1, warmup, 1e-3, 1e-8, total) if warmup > 1 else 1e-8
    after = nk.lr_at_step(warmup + 1, warmup, 1e-3, 1e-8, total)
    assert at == pytest.approx(1e-3, abs=1e-12)
    assert abs(at - before) <= 1e-3 / warmup + 1e-12
    assert after <= at


@given(st.integers(0, 400))
def test_lr_bounded(step):
    lr = nk.lr_at_step(step, 100, 1e-3, 1e-8, 400)
    assert 0.0 <= lr <= 1e-3


def test_set_precision_roundtrip():
    try:
        assert nk.set_precision("single") == torch.float32
        assert nk.tensor([1.0]).dtype == torch.float32
    finally:
        nk.set_precision("double")
    assert nk.tensor([1.0]).dtype == torch.float64

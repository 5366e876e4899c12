import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tvector import tensor as tn
from tvector.nn import (
    Affine,
    EncoderBlock,
    MultiHeadAttentionMem,
    TdnnLayer,
    encoder_block_forward,
    mha_mem_forward,
    positional_encoding,
    statistics_pooling,
    tdnn_forward,
)
from tvector.tensor import DimensionError, Tape, Tensor

from gradcheck import numeric_grad, rel_err
from oracles import naive_attention


def random_attention(rng, D, h, scale_mode="inv_sqrt_dk"):
    return MultiHeadAttentionMem.init(rng, D, h, scale_mode)


def attn_arrays(a):
    return a.w_q.data, a.w_k.data, a.w_v.data, a.w_o.data


def test_tdnn_examples():
    layer = TdnnLayer(Affine(Tensor(np.eye(3)), Tensor(np.zeros(3))), "none")
    x = np.random.default_rng(0).normal(size=(5, 3))
    assert np.array_equal(tdnn_forward(Tensor(x), layer).data, x)
    layer = TdnnLayer(Affine(Tensor(np.eye(2)), Tensor([1.0, 1.0])), "relu")
    assert np.array_equal(tdnn_forward(Tensor([[1.0, 2.0]]), layer).data, [[2.0, 3.0]])
    big = TdnnLayer.init(np.random.default_rng(0), 20, 512)
    assert tdnn_forward(Tensor(np.zeros((500, 20))), big).shape == (500, 512)
    with pytest.raises(DimensionError):
        tdnn_forward(Tensor(np.zeros((5, 19))), big)


def test_tdnn_is_per_frame():
    rng = np.random.default_rng(1)
    layer = TdnnLayer.init(rng, 4, 6)
    x = rng.normal(size=(7, 4))
    y = tdnn_forward(Tensor(x), layer).data
    x2 = x.copy()
    x2[3] += 10.0
    y2 = tdnn_forward(Tensor(x2), layer).data
    changed = np.any(y != y2, axis=1)
    assert changed[3] and changed.sum() <= 1


def test_positional_encoding():
    pe = positional_encoding(50, 16)
    assert np.array_equal(pe[0, 0::2], np.zeros(8)) and np.array_equal(pe[0, 1::2], np.ones(8))
    assert pe[1, 0] == pytest.approx(0.841471, abs=1e-6)
    assert np.all(np.abs(pe) <= 1.0)
    with pytest.raises(ValueError):
        positional_encoding(4, 7)


def test_attention_uniform_when_scores_vanish():
    rng = np.random.default_rng(2)
    D, h, M = 4, 2, 3
    a = random_attention(rng, D, h)
    a.w_q.data[:] = 0.0
    a.w_o.data[:] = np.eye(D)
    x, mem = rng.normal(size=(M, D)), rng.normal(size=(M, D))
    out, weights = mha_mem_forward(Tensor(x), mem, a, return_weights=True)
    values = np.concatenate([mem, x]) @ a.w_v.data
    np.testing.assert_allclose(out.data, np.tile(values.mean(axis=0), (M, 1)), atol=1e-12)
    np.testing.assert_allclose(weights.data, 1.0 / (2 * M))


def test_attention_single_key_hand_case():
    eye = lambda: Tensor(np.eye(2), requires_grad=True)
    a = MultiHeadAttentionMem(1, eye(), eye(), eye(), eye())
    out = mha_mem_forward(Tensor([[1.0, 0.0]]), None, a)
    np.testing.assert_allclose(out.data, [[1.0, 0.0]])


@pytest.mark.parametrize("memory", ["random", "zeros", "none"])
def test_attention_matches_naive_reference(memory):
    rng = np.random.default_rng(3)
    a = random_attention(rng, 4, 2)
    x = rng.normal(size=(3, 4))
    mem = {"random": rng.normal(size=(3, 4)), "zeros": np.zeros((3, 4)), "none": None}[memory]
    ref = naive_attention(x, mem, *attn_arrays(a), 2, a.scale)
    np.testing.assert_allclose(mha_mem_forward(Tensor(x), mem, a).data, ref, atol=1e-10)


def test_attention_scale_modes():
    rng = np.random.default_rng(4)
    assert random_attention(rng, 8, 4).scale == pytest.approx(1 / math.sqrt(2))
    a = random_attention(rng, 8, 4, "inv_sqrt_d")
    assert a.scale == pytest.approx(1 / math.sqrt(8))
    x = rng.normal(size=(5, 8))
    ref = naive_attention(x, None, *attn_arrays(a), 4, 1 / math.sqrt(8))
    np.testing.assert_allclose(mha_mem_forward(Tensor(x), None, a).data, ref, atol=1e-10)
    with pytest.raises(ValueError):
        random_attention(rng, 6, 4)


def test_attention_batched_matches_per_item():
    rng = np.random.default_rng(5)
    a = random_attention(rng, 8, 2)
    x, mem = rng.normal(size=(3, 4, 8)), rng.normal(size=(3, 4, 8))
    batched = mha_mem_forward(Tensor(x), mem, a).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], mha_mem_forward(Tensor(x[b]), mem[b], a).data, atol=1e-12)


def test_attention_errors():
    a = random_attention(np.random.default_rng(6), 4, 2)
    with pytest.raises(DimensionError):
        mha_mem_forward(Tensor(np.zeros((3, 5))), None, a)
    with pytest.raises(DimensionError):
        mha_mem_forward(Tensor(np.zeros((3, 4))), np.zeros((3, 5)), a)
    with pytest.raises(DimensionError):
        mha_mem_forward(Tensor(np.zeros((0, 4))), None, a)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6))
def test_attention_weight_rows_sum_to_one(seed, M):
    rng = np.random.default_rng(seed)
    a = random_attention(rng, 4, 2)
    _, w = mha_mem_forward(Tensor(rng.normal(size=(M, 4))), rng.normal(size=(M, 4)), a,
                           return_weights=True)
    assert w.shape == (2, M, 2 * M)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-10)


def test_identical_rows_give_identical_outputs():
    rng = np.random.default_rng(7)
    a = random_attention(rng, 4, 2)
    x = np.tile(rng.normal(size=(1, 4)), (5, 1))
    out = mha_mem_forward(Tensor(x), None, a).data
    np.testing.assert_allclose(out, np.tile(out[:1], (5, 1)), atol=1e-12)


def test_memory_receives_no_gradient():
    rng = np.random.default_rng(8)
    a = random_attention(rng, 4, 2)
    mem = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    with Tape():
        tn.backward(tn.sum_all(mha_mem_forward(x, mem, a)))
    assert np.all(mem.grad == 0.0)
    assert np.any(x.grad != 0.0)


def test_encoder_block_shape_and_zero_branches():
    rng = np.random.default_rng(9)
    block = EncoderBlock.init(rng, 512, 4, 2048)
    x = rng.normal(size=(20, 512))
    y = encoder_block_forward(Tensor(x), np.zeros((20, 512)), block)
    assert y.shape == (20, 512) and np.all(np.isfinite(y.data))

    small = EncoderBlock.init(rng, 8, 2, 16)
    for p in small.attention.parameters() + small.ffn_in.parameters() + small.ffn_out.parameters():
        p.data[:] = 0.0
    x = rng.normal(size=(4, 8))
    ln = lambda v: tn.layer_norm(Tensor(v), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(encoder_block_forward(Tensor(x), None, small).data, ln(ln(x)), atol=1e-12)


def test_encoder_block_gradient_wrt_input():
    rng = np.random.default_rng(10)
    block = EncoderBlock.init(rng, 8, 2, 16)
    x0, mem = rng.uniform(-1, 1, (4, 8)), rng.uniform(-1, 1, (4, 8))
    # a plain sum of a unit-gain layer norm is identically zero, so weight it
    w = rng.uniform(-1, 1, (4, 8))
    x = Tensor(x0.copy(), requires_grad=True)
    with Tape():
        tn.backward(tn.sum_all(encoder_block_forward(x, mem, block) * w))
    numeric = numeric_grad(lambda: float((encoder_block_forward(Tensor(x0), mem, block).data * w).sum()), x0)
    assert rel_err(x.grad, numeric) < 1e-4


def test_statistics_pooling():
    np.testing.assert_allclose(statistics_pooling(Tensor([[1.0, 3.0], [3.0, 5.0]])).data, [[2, 4, 1, 1]])
    np.testing.assert_allclose(statistics_pooling(Tensor([[7.0, 7.0]])).data, [[7, 7, 0, 0]], atol=1e-5)
    assert statistics_pooling(Tensor(np.zeros((49, 1500)))).shape == (1, 3000)
    with pytest.raises(DimensionError):
        statistics_pooling(Tensor(np.zeros((0, 3))))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_statistics_pooling_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 3))
    a = statistics_pooling(Tensor(x)).data
    b = statistics_pooling(Tensor(x[rng.permutation(6)])).data
    np.testing.assert_allclose(a, b, atol=1e-12)

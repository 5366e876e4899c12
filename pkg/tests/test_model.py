import struct

import numpy as np
import pytest

from tvector import tensor as tn
from tvector.model import (
    TvectorConfig,
    TvectorModel,
    XvectorModel,
    checkpoint_bytes,
    checkpoint_from_bytes,
    frame_encoder_pass,
    load_checkpoint,
    num_segments,
    save_checkpoint,
    segment_sequence,
    utterance_forward,
    xvector_forward,
)
from tvector.nn import EncoderBlock, encoder_block_forward, statistics_pooling
from tvector.tensor import DimensionError, Tensor

TOY = dict(n_speakers=3, n_features=5, dim=8, heads=2, depth=2, ffn_width=16, window=4, step=2,
           seg_tdnn_width=12, clf_hidden=10)


@pytest.fixture
def toy_model():
    return TvectorModel(TvectorConfig(**TOY), seed=0)


def test_config_validation():
    with pytest.raises(ValueError):
        TvectorConfig(dim=10, heads=4)
    with pytest.raises(ValueError):
        TvectorConfig(window=10, step=11)
    with pytest.raises(ValueError):
        TvectorConfig(step=0)
    with pytest.raises(ValueError):
        TvectorConfig(n_speakers=0)


@pytest.mark.parametrize("T, expected", [(100, 9), (20, 1), (500, 49), (29, 1), (30, 2), (5, 1)])
def test_num_segments(T, expected):
    assert num_segments(T, 20, 10) == expected


def test_segment_sequence_windows():
    S = np.arange(100 * 3, dtype=float).reshape(100, 3)
    segs = segment_sequence(Tensor(S), 20, 10)
    assert len(segs) == 9
    for i, seg in enumerate(segs):
        assert np.array_equal(seg.data, S[i * 10:i * 10 + 20])
    (only,) = segment_sequence(Tensor(S[:20]), 20, 10)
    assert np.array_equal(only.data, S[:20])


def test_segment_sequence_pads_short_input():
    (seg,) = segment_sequence(Tensor(np.ones((7, 2))), 10, 5)
    assert seg.shape == (10, 2)
    assert np.array_equal(seg.data[:7], np.ones((7, 2))) and np.all(seg.data[7:] == 0)
    with pytest.raises(ValueError):
        segment_sequence(Tensor(np.ones((7, 2))), 0, 5)


def test_frame_encoder_single_segment_is_plain_stack():
    rng = np.random.default_rng(0)
    blocks = [EncoderBlock.init(rng, 8, 2, 16) for _ in range(2)]
    seg = Tensor(rng.normal(size=(4, 8)))
    (vec,) = frame_encoder_pass([seg], blocks)
    h = seg
    for b in blocks:
        h = encoder_block_forward(h, np.zeros((4, 8)), b)
    np.testing.assert_allclose(vec.data, statistics_pooling(h).data, atol=1e-12)


def test_frame_encoder_memory_makes_identical_segments_differ():
    rng = np.random.default_rng(1)
    blocks = [EncoderBlock.init(rng, 8, 2, 16) for _ in range(2)]
    seg = Tensor(rng.normal(size=(4, 8)))
    v1, v2 = frame_encoder_pass([seg, seg], blocks)
    assert not np.allclose(v1.data, v2.data)
    w1, w2 = frame_encoder_pass([seg, seg], blocks, use_memory=False)
    np.testing.assert_allclose(w1.data, w2.data, atol=1e-12)


def test_frame_encoder_memory_chains_layer_outputs():
    rng = np.random.default_rng(2)
    blocks = [EncoderBlock.init(rng, 8, 2, 16) for _ in range(2)]
    segs = [Tensor(rng.normal(size=(4, 8))) for _ in range(2)]
    hidden = []
    _, v2 = frame_encoder_pass(segs, blocks, hidden=hidden)
    h = encoder_block_forward(segs[1], hidden[0][0].data, blocks[0])
    h = encoder_block_forward(h, hidden[0][1].data, blocks[1])
    np.testing.assert_allclose(v2.data, statistics_pooling(h).data, atol=1e-12)


def test_frame_encoder_full_scale_shapes():
    rng = np.random.default_rng(3)
    blocks = [EncoderBlock.init(rng, 512, 4, 2048)]
    segs = [Tensor(rng.normal(size=(20, 512))) for _ in range(3)]
    assert [v.shape for v in frame_encoder_pass(segs, blocks)] == [(1, 1024)] * 3


def test_forward_scores_in_unit_interval(toy_model):
    x = np.random.default_rng(4).normal(size=(12, 5))
    s = utterance_forward(x, toy_model).scores
    assert s.shape == (3,) and np.all((s > 0) & (s < 1))


def test_zero_classifier_gives_half(toy_model):
    toy_model.clf2.weight.data[:] = 0.0
    toy_model.clf2.bias.data[:] = 0.0
    s = utterance_forward(np.random.default_rng(5).normal(size=(12, 5)), toy_model).scores
    assert np.array_equal(s, [0.5, 0.5, 0.5])


def test_forward_rejects_bad_input(toy_model):
    with pytest.raises(DimensionError):
        toy_model.forward(np.zeros((12, 4)))
    with pytest.raises(DimensionError):
        toy_model.forward(np.zeros((0, 5)))


def test_batched_forward_matches_single(toy_model):
    x = np.random.default_rng(6).normal(size=(3, 12, 5))
    batched = toy_model.predict(x)
    for b in range(3):
        np.testing.assert_allclose(batched[b], toy_model.predict(x[b]), atol=1e-12)


def test_memory_does_not_leak_across_utterances(toy_model):
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(12, 5)), rng.normal(size=(12, 5))
    first = [toy_model.predict(a), toy_model.predict(b)]
    second = [toy_model.predict(b), toy_model.predict(a)]
    assert np.array_equal(first[0], second[1]) and np.array_equal(first[1], second[0])


def test_frame_blocks_share_one_parameter_copy(toy_model):
    x = Tensor(np.random.default_rng(8).normal(size=(12, 8)))
    segs = segment_sequence(x, 4, 2)
    before = [v.data for v in frame_encoder_pass(segs, toy_model.frame_blocks)]
    toy_model.frame_blocks[0].ffn_in.weight.data *= 1.5
    after = [v.data for v in frame_encoder_pass(segs, toy_model.frame_blocks)]
    assert all(not np.allclose(u, v) for u, v in zip(before, after))
    names = [n for n, _ in toy_model.named_parameters()]
    assert len(names) == len(set(names))
    assert sum(n.startswith("frame.") for n in names) == 2 * len(list(toy_model.frame_blocks[0].named_parameters()))


@pytest.mark.parametrize("scale", [1, 2])
def test_shape_chain_is_parametric(scale):
    cfg = TvectorConfig(n_speakers=5, n_features=6, dim=8 * scale, heads=2 * scale, depth=scale,
                        ffn_width=16, window=4 * scale, step=2 * scale, seg_tdnn_width=10,
                        clf_hidden=7)
    trace = {}
    out = TvectorModel(cfg).forward(np.zeros((30, 6)), trace=trace)
    N = num_segments(30, 4 * scale, 2 * scale)
    assert out.shape == (1, 5)
    assert trace["segment_vectors"] == (N, 16 * scale)
    assert trace["utterance_pool"] == (1, 20)


def test_deterministic_given_seed():
    cfg = TvectorConfig(**TOY)
    x = np.random.default_rng(9).normal(size=(12, 5))
    a, b = TvectorModel(cfg, seed=3), TvectorModel(cfg, seed=3)
    assert np.array_equal(a.predict(x), b.predict(x))
    assert not np.array_equal(a.predict(x), TvectorModel(cfg, seed=4).predict(x))


def test_xvector_baseline():
    cfg = TvectorConfig(**TOY)
    model = XvectorModel(cfg, seed=0)
    rng = np.random.default_rng(10)
    x = rng.normal(size=(15, 5))
    s = xvector_forward(x, model).scores
    assert s.shape == (3,) and np.all((s > 0) & (s < 1))
    np.testing.assert_allclose(xvector_forward(x[rng.permutation(15)], model).scores, s, atol=1e-12)
    model.clf2.weight.data[:] = 0.0
    assert np.array_equal(xvector_forward(x, model).scores, [0.5] * 3)


def test_xvector_full_scale_pooling():
    model = XvectorModel(TvectorConfig(n_speakers=4, dim=64), seed=0)
    assert model.tdnn[-1].weight.shape == (64, 1500)
    assert model.clf1.weight.shape == (3000, 512)


@pytest.mark.parametrize("cls", [TvectorModel, XvectorModel])
def test_checkpoint_round_trip(tmp_path, cls):
    model = cls(TvectorConfig(**TOY, use_memory=False, scale_mode="inv_sqrt_d"), seed=1)
    path = tmp_path / "m.tvec"
    save_checkpoint(path, model)
    loaded = load_checkpoint(path)
    assert type(loaded) is cls and loaded.config == model.config
    assert checkpoint_bytes(loaded) == path.read_bytes()


def test_checkpoint_layout(toy_model):
    blob = checkpoint_bytes(toy_model)
    assert blob[:4] == b"TVEC"
    version, n = struct.unpack_from("<II", blob, 4)
    text = blob[12:12 + n].decode()
    assert version == 1 and "arch=tvector\n" in text and "dim=8\n" in text
    (name_len,) = struct.unpack_from("<I", blob, 12 + n)
    assert blob[16 + n:16 + n + name_len] == b"global_tdnn.weight"


def test_checkpoint_rejects_corruption(toy_model):
    blob = checkpoint_bytes(toy_model)
    with pytest.raises(ValueError):
        checkpoint_from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        checkpoint_from_bytes(blob[:-4])
    with pytest.raises(ValueError):
        checkpoint_from_bytes(blob + b"\0")

import math

import numpy as np
import pytest

from seq2seg import tensor as T
from seq2seg.decoders import MLAHead, NaiveHead, PUPHead, map_to_sequence, mla_layers, sequence_to_map
from seq2seg.nn import BatchNorm2d, Conv2d
from seq2seg.tensor import Tensor


def rand_seq(seed, gh, gw, c, n=1):
    return Tensor(np.random.default_rng(seed).normal(size=(n, gh * gw, c)), requires_grad=True)


def test_sequence_to_map_row_major():
    z = Tensor(np.arange(8, dtype=np.float32).reshape(1, 4, 2))
    m = sequence_to_map(z, 2, 2)
    assert m.shape == (1, 2, 2, 2)
    np.testing.assert_array_equal(m.data[0, 0, 1], z.data[0, 1])
    np.testing.assert_array_equal(m.data[0, 1, 0], z.data[0, 2])


def test_map_sequence_round_trip_and_large_grid():
    z = rand_seq(0, 48, 48, 3)
    m = sequence_to_map(z, 48, 48)
    assert m.shape == (1, 48, 48, 3)
    assert map_to_sequence(m).data.tobytes() == z.data.tobytes()


def test_grid_mismatch():
    with pytest.raises(T.TensorError, match="does not hold"):
        sequence_to_map(rand_seq(1, 2, 2, 3), 3, 2)


@pytest.mark.parametrize("depth,streams,expected", [(24, 4, [6, 12, 18, 24]), (4, 4, [1, 2, 3, 4]), (12, 3, [4, 8, 12])])
def test_mla_layer_selection(depth, streams, expected):
    assert mla_layers(depth, streams) == expected


def test_mla_layer_selection_indivisible():
    with pytest.raises(ValueError, match="not divisible"):
        mla_layers(10, 4)


def test_naive_shape_and_uniform_loss_with_zero_classifier():
    head = NaiveHead(np.random.default_rng(2), 8, 3, width=16)
    head.cls.weight.data[...] = 0.0
    logits = head(rand_seq(3, 2, 2, 8), 2, 2, (32, 32))
    assert logits.shape == (1, 32, 32, 3)
    np.testing.assert_array_equal(logits.data, 0.0)
    labels = np.random.default_rng(4).integers(0, 3, (1, 32, 32))
    loss = T.cross_entropy_map(logits, labels)
    assert loss.item() == pytest.approx(math.log(3), rel=1e-6)


def test_pup_spatial_trace():
    head = PUPHead(np.random.default_rng(5), 8, 3, width=8)
    logits = head(rand_seq(6, 2, 2, 8), 2, 2, (32, 32))
    assert logits.shape == (1, 32, 32, 3)
    assert head.upsample_count == 4
    assert [u.shape[1] for u in head.upsampled] == [4, 8, 16, 32]


def test_pup_trace_for_768_grid():
    # 48 -> 96 -> 192 -> 384 -> 768 with a single channel to keep it cheap
    head = PUPHead(np.random.default_rng(7), 1, 2, width=1)
    with T.no_grad():
        head(rand_seq(8, 48, 48, 1), 48, 48, (768, 768))
    assert [u.shape[1] for u in head.upsampled] == [96, 192, 384, 768]


def test_pup_constant_map_stays_constant_with_identity_convs():
    c = 4
    head = PUPHead(np.random.default_rng(9), c, 2, width=c).eval()
    for stage in head.stages:
        w = np.zeros((3, 3, c, c), np.float32)
        w[1, 1] = np.eye(c)
        stage.conv.weight.data[...] = w
    for mod in head.modules():
        if isinstance(mod, BatchNorm2d):
            mod.state.count = 1
    z = Tensor(np.full((1, 9, c), 0.75, np.float32))
    with T.no_grad():
        head(z, 3, 3, (48, 48))
    for i, u in enumerate(head.upsampled, start=1):
        assert np.ptp(u.data) <= 1e-6
        np.testing.assert_allclose(u.data, 0.75 * (1 + 1e-5) ** (-i / 2), rtol=1e-6)


def test_mla_shapes_and_channel_arithmetic():
    c = 16
    head = MLAHead(np.random.default_rng(10), c, 3, [1, 2, 3, 4])
    feats = [rand_seq(11 + i, 2, 2, c) for i in range(4)]
    logits = head(feats, 2, 2, (32, 32))
    assert logits.shape == (1, 32, 32, 3)
    assert head.cls.weight.shape == (1, 1, 4 * c // 4, 3)
    assert head.streams[0].conv3.conv.weight.shape[-1] == c // 4
    assert head.streams[0].reduce.conv.weight.shape[-1] == c // 2


def test_mla_channel_count_for_large_encoder():
    head = MLAHead(np.random.default_rng(12), 1024, 2, [6, 12, 18, 24])
    assert head.streams[0].conv3.conv.weight.shape[-1] == 256
    assert head.cls.weight.shape[2] == 1024


def test_mla_top_down_sum_reaches_shallow_streams_only():
    """Changing the deepest feature moves every stream; changing the shallowest moves only its own."""
    c = 8
    head = MLAHead(np.random.default_rng(13), c, 2, [1, 2, 3, 4]).eval()
    for mod in head.modules():
        if isinstance(mod, BatchNorm2d):
            mod.state.count = 1
    feats = [rand_seq(20 + i, 2, 2, c) for i in range(4)]
    captured = []
    orig = [s.fuse for s in head.streams]

    def run(fs):
        captured.clear()
        for s, f in zip(head.streams, orig):
            s.fuse = (lambda f: (lambda x: (captured.append(x.data.copy()), f(x))[1]))(f)
        with T.no_grad():
            head(fs, 2, 2, (32, 32))
        return list(captured)

    base = run(feats)
    bumped_deep = run(feats[:3] + [Tensor(feats[3].data + 1.0)])
    bumped_shallow = run([Tensor(feats[0].data + 1.0)] + feats[1:])
    assert all(not np.array_equal(a, b) for a, b in zip(base, bumped_deep))
    assert not np.array_equal(base[0], bumped_shallow[0])
    assert all(np.array_equal(a, b) for a, b in zip(base[1:], bumped_shallow[1:]))


@pytest.mark.parametrize("variant", ["naive", "pup", "mla"])
def test_every_parameter_receives_gradient(variant):
    rng = np.random.default_rng(14)
    c, k = 8, 3
    if variant == "naive":
        head, feats = NaiveHead(rng, c, k, width=8), rand_seq(15, 2, 2, c, n=2)
    elif variant == "pup":
        head, feats = PUPHead(rng, c, k, width=8), rand_seq(15, 2, 2, c, n=2)
    else:
        head, feats = MLAHead(rng, c, k, [1, 2, 3, 4]), [rand_seq(15 + i, 2, 2, c, n=2) for i in range(4)]
    labels = rng.integers(0, k, (2, 32, 32))
    loss = T.cross_entropy_map(head(feats, 2, 2, (32, 32)), labels)
    T.backward(loss)
    for name, p in head.named_parameters():
        assert p.grad is not None and np.linalg.norm(p.grad) > 0, name
    for f in feats if isinstance(feats, list) else [feats]:
        assert np.linalg.norm(f.grad) > 0


def test_classifier_has_bias_hidden_convs_do_not():
    head = NaiveHead(np.random.default_rng(16), 8, 3)
    names = dict(head.named_parameters())
    assert "cls.bias" in names and "proj.conv.bias" not in names
    assert isinstance(head.cls, Conv2d)

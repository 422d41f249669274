import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from seq2seg import io as sio
from seq2seg.data import (
    SegmentationDataset,
    SynthSpec,
    channel_stats,
    generate_synth,
    load_index,
    load_pair,
    read_labels,
    render_sample,
    write_labels,
)


# --- STTN -----------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(
    hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5), elements=st.floats(width=32))
    | hnp.arrays(np.uint16, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5))
)
def test_sttn_round_trip(arr):
    buf = io.BytesIO()
    sio.write_sttn(buf, arr)
    buf.seek(0)
    back = sio.read_sttn(buf)
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_sttn_header_bytes():
    buf = io.BytesIO()
    sio.write_sttn(buf, np.zeros((2, 3), np.uint16))
    raw = buf.getvalue()
    assert raw[:7] == b"STTN\x01\x01\x02"
    assert raw[7:15] == b"\x02\x00\x00\x00\x03\x00\x00\x00"
    assert len(raw) == 15 + 12


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda b: b[:-1], "truncated"),
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + b"\x02" + b[5:], "version"),
        (lambda b: b[:5] + b"\x07" + b[6:], "dtype"),
        (lambda b: b[:5], "truncated"),
        (lambda b: b + b"\x00", "trailing"),
    ],
)
def test_sttn_corrupt_files(tmp_path, mutate, match):
    path = tmp_path / "t.sttn"
    sio.save_tensor(path, np.arange(6, dtype=np.float32).reshape(2, 3))
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(sio.CorruptFileError, match=match):
        sio.load_tensor(path)


def test_sttn_rejects_other_dtypes():
    with pytest.raises(TypeError):
        sio.write_sttn(io.BytesIO(), np.zeros(2, np.float64))


def test_archive_round_trip_and_truncation(tmp_path):
    path = tmp_path / "a.bin"
    tensors = {"enc.layer1.wq": np.ones((2, 2), np.float32), "meta.x": np.arange(3, dtype=np.uint16)}
    sio.save_archive(path, tensors)
    back = sio.load_archive(path)
    assert list(back) == list(tensors)
    assert all(back[k].tobytes() == v.tobytes() for k, v in tensors.items())
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(sio.CorruptFileError):
        sio.load_archive(path)


# --- Netpbm --------------------------------------------------------------------


def test_ppm_round_trip_preserves_bytes(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    sio.write_ppm(tmp_path / "x.ppm", rgb)
    raw = (tmp_path / "x.ppm").read_bytes()
    assert raw.startswith(b"P6\n7 5\n255\n")
    assert raw[len(b"P6\n7 5\n255\n") :] == rgb.tobytes()
    assert sio.read_ppm(tmp_path / "x.ppm").tobytes() == rgb.tobytes()


def test_pgm_8_and_16_bit(tmp_path):
    g8 = np.arange(12, dtype=np.uint8).reshape(3, 4)
    g16 = (np.arange(12, dtype=np.uint16) * 5000).reshape(3, 4)
    sio.write_pgm(tmp_path / "a.pgm", g8)
    sio.write_pgm(tmp_path / "b.pgm", g16)
    assert sio.read_pgm(tmp_path / "a.pgm").tobytes() == g8.tobytes()
    back = sio.read_pgm(tmp_path / "b.pgm")
    assert back.dtype == np.uint16 and np.array_equal(back, g16)


def test_netpbm_header_comments(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 # width\n1\n255\n\x07\x09")
    np.testing.assert_array_equal(sio.read_pgm(path), [[7, 9]])


@pytest.mark.parametrize(
    "payload,match",
    [
        (b"P6\n2 2\n255\n" + b"\x00" * 5, "truncated pixel"),
        (b"P5\n2 2\n255\n\x00\x00\x00\x00", "expected P6"),
        (b"P6\n2 x\n255\n" + b"\x00" * 12, "non-numeric"),
        (b"P6\n2 2\n", "truncated"),
        (b"P6\n0 2\n255\n", "invalid"),
    ],
)
def test_netpbm_corrupt(tmp_path, payload, match):
    path = tmp_path / "bad.ppm"
    path.write_bytes(payload)
    with pytest.raises(sio.CorruptFileError, match=match):
        sio.read_ppm(path)


# --- synthetic data --------------------------------------------------------------


def test_spec_validation():
    with pytest.raises(ValueError, match="multiple of 16"):
        SynthSpec(size=40)
    with pytest.raises(ValueError, match="two classes"):
        SynthSpec(num_classes=1)


def test_zero_shapes_is_all_background():
    rgb, lab = render_sample(SynthSpec(min_shapes=0, max_shapes=0), np.random.default_rng(0))
    assert rgb.shape == (64, 64, 3) and (lab == 0).all()


def test_label_values_below_k_over_100_images():
    spec = SynthSpec(size=32, num_classes=5)
    seen = set()
    for i in range(100):
        _, lab = render_sample(spec, np.random.default_rng([1, 0, i]))
        assert lab.max() < 5
        seen |= set(np.unique(lab).tolist())
    assert seen == set(range(5))


def test_generation_is_deterministic(tmp_path):
    spec = SynthSpec(size=32, train=3, val=2, seed=7)
    generate_synth(spec, tmp_path / "a")
    generate_synth(spec, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 1 + 2 * 5
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_different_seed_differs(tmp_path):
    a = generate_synth(SynthSpec(size=32, train=1, val=0, seed=1), tmp_path / "a")["train"]
    b = generate_synth(SynthSpec(size=32, train=1, val=0, seed=2), tmp_path / "b")["train"]
    assert a.images[0].read_bytes() != b.images[0].read_bytes()


def test_index_and_pairs(tmp_path):
    idx = generate_synth(SynthSpec(size=32, train=2, val=1), tmp_path)
    assert len(idx["train"]) == 2 and len(idx["val"]) == 1
    img, lab = load_pair(idx["train"], 1)
    assert img.shape == (32, 32, 3) and img.dtype == np.float32 and lab.shape == (32, 32)
    mean, std = channel_stats(idx["train"])
    ds = SegmentationDataset(idx["train"], mean, std)
    stacked = np.stack([ds[i][0] for i in range(len(ds))]).reshape(-1, 3)
    np.testing.assert_allclose(stacked.mean(0), 0.0, atol=1e-4)
    np.testing.assert_allclose(stacked.std(0), 1.0, atol=1e-3)
    with pytest.raises(IndexError):
        load_pair(idx["train"], 2)


def test_label_write_read_round_trip(tmp_path):
    lab = np.random.default_rng(0).integers(0, 300, (8, 8)).astype(np.uint16)
    write_labels(tmp_path / "l.sttn", lab, 300)
    assert read_labels(tmp_path / "l.sttn").tobytes() == lab.tobytes()
    small = (lab % 4).astype(np.uint16)
    write_labels(tmp_path / "l.pgm", small, 4)
    assert read_labels(tmp_path / "l.pgm").tobytes() == small.tobytes()


def test_many_classes_use_sttn_labels(tmp_path):
    idx = generate_synth(SynthSpec(size=16, num_classes=300, train=1, val=0), tmp_path)["train"]
    assert idx.labels[0].suffix == ".sttn"


def test_dim_mismatch_and_truncation(tmp_path):
    idx = generate_synth(SynthSpec(size=32, train=2, val=0), tmp_path)["train"]
    sio.write_pgm(idx.labels[0], np.zeros((16, 32), np.uint8))
    with pytest.raises(ValueError, match="vs labels"):
        load_pair(idx, 0)
    idx.images[1].write_bytes(idx.images[1].read_bytes()[:-10])
    with pytest.raises(sio.CorruptFileError, match="truncated"):
        load_pair(idx, 1)


def test_missing_dataset_cfg(tmp_path):
    with pytest.raises(FileNotFoundError, match="dataset.cfg"):
        load_index(tmp_path)

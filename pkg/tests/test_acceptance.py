"""Acceptance gate.  Each test records one PASS/FAIL line (see conftest.py) and
asserts the same condition, so a red criterion is also a failed test.

Tolerances are the pinned acceptance values; none are loosened here.
"""

import time

import numpy as np
import pytest

from seq2seg import tensor as T
from seq2seg.cli import main as cli_main
from seq2seg.data import SegmentationDataset, SynthSpec, channel_stats, generate_synth
from seq2seg.encoder import Encoder, EncoderConfig
from seq2seg.evaluation import (
    ConfusionMatrix,
    compute_miou,
    evaluate_dataset,
    multi_scale_logits,
    sliding_window_infer,
)
from seq2seg.model import ModelConfig, build_model
from seq2seg.tensor import Tensor
from seq2seg.training import TrainConfig, total_loss, train_loop
from seq2seg.viz import attention_rollout, pos_embed_similarity, render_feature, similarity_tile

from acceptance_log import record
from gradcheck import sampled_gradcheck

TINY = EncoderConfig(layers=4, hidden=64, heads=4)
VARIANTS = ("naive", "pup", "mla")


def tiny_model(variant, seed=0, **kw):
    return build_model(ModelConfig(TINY, variant=variant, num_classes=4, **kw), seed)


def warm_bn(model, size=64, seed=0):
    """One train-mode forward so batch-norm layers have running statistics."""
    x = np.random.default_rng(seed).normal(size=(2, size, size, 3)).astype(np.float32)
    with T.no_grad():
        model(x)
    return model.eval()


# 1 ------------------------------------------------------------------------------


def test_criterion_1_gradient_integrity():
    start = time.perf_counter()
    worst, details = 0.0, []
    for variant in VARIANTS:
        with T.precision("float64"):
            model = tiny_model(variant)
            rng = np.random.default_rng(1)
            x = rng.normal(size=(2, 32, 32, 3))
            y = rng.integers(0, 4, (2, 32, 32))

            def loss():
                out = model(x)
                return total_loss(out.logits, out.aux_logits, y, 0.4)

            errors, skipped = sampled_gradcheck(T, model, loss, rng, count=50, step=1e-3)
        w = max(e[-1] for e in errors)
        worst = max(worst, w)
        details.append(f"{variant} {len(errors)} coords max rel err {w:.1e} ({skipped} kink redraws)")
        assert len(errors) == 50
    elapsed = time.perf_counter() - start
    ok = worst < 1e-2 and elapsed < 120
    record(1, "gradient integrity", ok, "; ".join(details) + f"; {elapsed:.0f}s")
    assert ok


# 2 ------------------------------------------------------------------------------


def test_criterion_2_shape_and_protocol_contracts():
    shapes_ok = True
    pup_counts = []
    for variant in VARIANTS:
        model = tiny_model(variant)
        for hw in ((32, 32), (64, 64), (128, 96)):
            with T.no_grad():
                out = model(np.zeros((1,) + hw + (3,), np.float32))
            shapes_ok &= out.logits.shape == (1,) + hw + (4,)
            if variant == "pup":
                pup_counts.append(model.decoder.upsample_count)
    deep = build_model(ModelConfig(EncoderConfig(24, 16, 2), variant="mla", num_classes=4, decoder_width=8), 0)
    with T.no_grad():
        deep_out = deep(np.zeros((1, 32, 32, 3), np.float32))
    mla_layers = deep.decoder.layers
    ok = shapes_ok and pup_counts == [4, 4, 4] and mla_layers == [6, 12, 18, 24] and deep_out.logits.shape == (1, 32, 32, 4)
    record(2, "shape/protocol contracts", ok, f"H x W x K for 3 sizes x 3 decoders: {shapes_ok}; PUP upsamples {pup_counts}; MLA layers {mla_layers}")
    assert ok


# 3 ------------------------------------------------------------------------------


def test_criterion_3_attention_invariants():
    row_err, perm_err = 0.0, 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        enc = Encoder(rng, TINY)
        e = rng.normal(size=(2, 8, 64)).astype(np.float32)
        perm = rng.permutation(8)
        with T.no_grad():
            f = enc(Tensor(e), keep_attention=True)
            fp = enc(Tensor(e[:, perm]))
        row_err = max(row_err, max(float(np.abs(a.sum(-1) - 1).max()) for a in f.attention))
        perm_err = max(perm_err, max(float(np.abs(zp.data - z.data[:, perm]).max()) for z, zp in zip(f.layers, fp.layers)))
    ok = row_err <= 1e-5 and perm_err <= 1e-5
    record(3, "attention invariants", ok, f"max |row sum - 1| {row_err:.1e}; max permutation deviation {perm_err:.1e}")
    assert ok


# 4 ------------------------------------------------------------------------------


def test_criterion_4_overfit(tmp_path):
    start = time.perf_counter()
    idx = generate_synth(SynthSpec(size=64, num_classes=4, train=4, val=0, seed=0), tmp_path)["train"]
    mean, std = channel_stats(idx)
    ds = SegmentationDataset(idx, mean, std)
    model = tiny_model("pup", norm_mean=mean, norm_std=std)
    # memorisation run: resize and flip augmentation off
    cfg = TrainConfig(total_iters=300, batch_size=2, base_lr=0.01, poly_power=0.9, aux_weight=0.4, scale_min=1.0, scale_max=1.0, flip=False)
    result = train_loop(model, ds, cfg)
    metrics, _, _ = evaluate_dataset(model.predict_logits, [ds[i] for i in range(len(ds))], 4, window=64)
    elapsed = time.perf_counter() - start
    ok = metrics.pixel_acc >= 0.99 and metrics.miou >= 0.95 and elapsed < 600
    record(4, "overfit", ok, f"pixel acc {metrics.pixel_acc:.4f} (>= 0.99), mIoU {metrics.miou:.4f} (>= 0.95), final loss {result.losses[-1]:.3f}, {elapsed:.0f}s")
    assert ok


# 5 ------------------------------------------------------------------------------


def test_criterion_5_protocol_equivalences():
    model = warm_bn(tiny_model("pup"))
    rng = np.random.default_rng(3)
    big = rng.normal(size=(96, 128, 3)).astype(np.float32)
    ms = multi_scale_logits(model.predict_logits, big, scales=[1.0], flip=False, window=64, stride=32)
    sw = sliding_window_infer(model.predict_logits, big, window=64, stride=32)
    same_ms = ms.tobytes() == sw.tobytes()
    whole = True
    for hw in ((64, 64), (48, 64), (32, 32)):
        img = rng.normal(size=hw + (3,)).astype(np.float32)
        whole &= sliding_window_infer(model.predict_logits, img, window=64, stride=42).tobytes() == model.predict_logits(img).tobytes()
    exact = 0
    for i in range(100):
        r = np.random.default_rng([5, i])
        k = int(r.integers(2, 8))
        truth = r.integers(0, k, (20, 24))
        truth[r.random(truth.shape) < 0.05] = 255
        pred = r.integers(0, k, (20, 24))
        ious = []
        for c in range(k):
            keep = truth != 255
            p, t = (pred == c) & keep, (truth == c) & keep
            if (p | t).sum():
                ious.append((p & t).sum() / (p | t).sum())
        exact += compute_miou(ConfusionMatrix(k).update(pred, truth)).miou == float(np.mean(ious))
    ok = same_ms and whole and exact == 100
    record(5, "protocol equivalences", ok, f"single-scale == sliding window bitwise: {same_ms}; window >= image == whole forward: {whole}; mIoU exact on {exact}/100 pairs")
    assert ok


# 6 ------------------------------------------------------------------------------


def test_criterion_6_pup_vs_naive(tmp_path):
    idx = generate_synth(SynthSpec(size=64, num_classes=4, train=8, val=4, seed=0), tmp_path)
    mean, std = channel_stats(idx["train"])
    train = SegmentationDataset(idx["train"], mean, std)
    val = SegmentationDataset(idx["val"], mean, std)
    wins, rows = 0, []
    for seed in range(3):
        scores = {}
        for variant in ("naive", "pup"):
            model = tiny_model(variant, seed, norm_mean=mean, norm_std=std)
            train_loop(model, train, TrainConfig(total_iters=300, seed=seed))
            metrics, _, _ = evaluate_dataset(model.predict_logits, [val[i] for i in range(len(val))], 4, window=64)
            scores[variant] = metrics.miou
        wins += scores["pup"] >= scores["naive"]
        rows.append(f"seed {seed}: PUP {scores['pup']:.3f} vs Naive {scores['naive']:.3f}")
    ok = wins >= 2
    record(6, "PUP >= Naive", ok, f"{wins}/3 seeds; " + "; ".join(rows))
    assert ok


# 7 ------------------------------------------------------------------------------


def render_all(seed):
    model = warm_bn(tiny_model("pup", seed))
    img = np.random.default_rng(9).normal(size=(64, 64, 3)).astype(np.float32)
    with T.no_grad():
        out = model(img[None], keep_attention=True, with_aux=False)
    _, stages = attention_rollout(out.features.attention, return_stages=True)
    pos = model.embed.pos.data
    images = [pos_embed_similarity(pos), render_feature(out.features[4].data[0].reshape(4, 4, -1), "pca1")]
    images += [render_feature(u.data[0], "mean") for u in model.decoder.upsampled]
    return stages, pos, images


def test_criterion_7_visualization_determinism():
    stages, pos, first = render_all(0)
    row_err = max(float(np.abs(r.sum(-1) - 1).max()) for r in stages)
    gh, gw, _ = pos.shape
    self_max = all(
        similarity_tile(pos, r, c)[r, c] == similarity_tile(pos, r, c).max() for r in range(gh) for c in range(gw)
    )
    _, _, second = render_all(0)
    identical = all(a.tobytes() == b.tobytes() for a, b in zip(first, second))
    ok = row_err <= 1e-5 and self_max and identical
    record(7, "visualization determinism", ok, f"rollout row error {row_err:.1e} over {len(stages)} stages; self-similarity is tile max: {self_max}; byte-identical reruns: {identical}")
    assert ok


# 8 ------------------------------------------------------------------------------


def pipeline(root):
    data, ckpt, metrics = root / "data", root / "model.ckpt", root / "metrics.csv"
    assert cli_main(["gen-data", "--out", str(data), "--seed", "7", "--images", "4", "--size", "64", "--classes", "4"]) == 0
    assert cli_main(["train", "--data", str(data), "--checkpoint", str(ckpt), "--log", str(root / "train.csv"), "--iters", "50", "--seed", "7"]) == 0
    assert cli_main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--scales", "1.0", "--csv", str(metrics)]) == 0
    return metrics.read_bytes()


def test_criterion_8_pipeline_determinism(tmp_path, capsys):
    a = pipeline(tmp_path / "run1")
    b = pipeline(tmp_path / "run2")
    capsys.readouterr()
    ok = a == b and a.startswith(b"class,iou\n")
    record(8, "pipeline determinism", ok, f"metrics CSV byte-identical across two runs: {a == b} ({len(a)} bytes)")
    assert ok

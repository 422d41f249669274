"""Command line entry point: ``seq2seg {gen-data,train,eval,infer,viz}``.

Exit status is 0 on success, 1 on usage errors (bad flags, unreadable or
invalid config) and 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import io
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io as sio
from . import viz
from .data import (
    SegmentationDataset,
    SynthSpec,
    channel_stats,
    generate_synth,
    load_index,
    load_raw_pair,
    synth_spec_from,
)
from .encoder import EncoderConfig
from .evaluation import DEFAULT_SCALES, compute_miou, default_stride, evaluate_dataset, multi_scale_logits
from .model import ModelConfig, build_model, load_checkpoint
from .training import TrainConfig, coerce, parse_config, train_config_from, train_loop

logger = logging.getLogger("seq2seg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# keys accepted in a training config file besides TrainConfig fields
MODEL_KEYS = {
    "variant": "pup",
    "layers": 4,
    "hidden": 64,
    "heads": 4,
    "mlp_ratio": 4,
    "final_norm": True,
    "dropout": 0.0,
    "decoder_width": 256,
    "mla_streams": 4,
    "aux_layers": "",
    "patch_size": 16,
}
PATH_KEYS = {"data": "", "checkpoint": "model.ckpt", "log": "metrics.csv"}


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _point(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected r,c, got {text!r}") from None
    return r, c


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seq2seg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic segmentation dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--images", type=int, help="training images")
    g.add_argument("--val-images", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--classes", type=int)
    g.add_argument("--noise", type=float)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--checkpoint", "--out", dest="checkpoint")
    t.add_argument("--log")
    t.add_argument("--iters", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--variant", choices=("naive", "pup", "mla"))
    t.add_argument("--eval-every", type=int)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--scales", type=_floats, default=list(DEFAULT_SCALES))
    e.add_argument("--flip", action="store_true")
    e.add_argument("--window", type=int)
    e.add_argument("--stride", type=int)
    e.add_argument("--average", choices=("logits", "probs"), default="logits")
    e.add_argument("--csv", help="also write the per-class table here")
    e.add_argument("--pred-dir", help="write predicted maps as P5 images")
    e.add_argument("--dump-logits", action="store_true", help="with --pred-dir, also write STTN logits")

    i = sub.add_parser("infer", help="segment one P6 image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True, help="P5 class-index map")
    i.add_argument("--logits", help="STTN dump of the averaged logits")
    i.add_argument("--scales", type=_floats, default=[1.0])
    i.add_argument("--flip", action="store_true")
    i.add_argument("--window", type=int)
    i.add_argument("--stride", type=int)

    v = sub.add_parser("viz", help="render attention, rollout, position and feature images")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--image", required=True)
    v.add_argument("--out-dir", required=True)
    v.add_argument("--layer", type=int, default=1)
    v.add_argument("--point", type=_point)
    v.add_argument("--rollout", action="store_true")
    v.add_argument("--pos-sim", action="store_true")
    v.add_argument("--feature", action="append", default=[], help="zN (encoder layer) or uN (PUP stage)")
    v.add_argument("--reduction", choices=("mean", "pca1"), default="mean")
    return p


# ---------------------------------------------------------------------------


def _read_config(path: Optional[str]) -> dict[str, str]:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from None
    try:
        return parse_config(text)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def cmd_gen_data(args) -> int:
    values = _read_config(args.config)
    try:
        spec = synth_spec_from(values)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"bad dataset config: {exc}") from None
    overrides = {
        "seed": args.seed,
        "train": args.images,
        "val": args.val_images,
        "size": args.size,
        "num_classes": args.classes,
        "noise": args.noise,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if "train" in overrides and "val" not in overrides and "val" not in values:
        overrides["val"] = max(1, overrides["train"] // 4)
    try:
        spec = dataclasses.replace(spec, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    generate_synth(spec, args.out)
    print(f"wrote {spec.train} train / {spec.val} val images to {args.out}")
    return 0


def _train_settings(args):
    values = _read_config(args.config)
    known = {f.name for f in dataclasses.fields(TrainConfig)} | set(MODEL_KEYS) | set(PATH_KEYS)
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    flag_map = {
        "data": args.data,
        "checkpoint": args.checkpoint,
        "log": args.log,
        "total_iters": args.iters,
        "base_lr": args.lr,
        "batch_size": args.batch_size,
        "seed": args.seed,
        "variant": args.variant,
        "eval_every": args.eval_every,
    }
    for k, v in flag_map.items():
        if v is not None:
            values[k] = str(v)
    try:
        tcfg = train_config_from(values)
        model_vals = {k: coerce(values[k], d) if k in values else d for k, d in MODEL_KEYS.items()}
    except ValueError as exc:
        raise UsageError(f"bad config value: {exc}") from None
    paths = {k: values.get(k, d) for k, d in PATH_KEYS.items()}
    if not paths["data"]:
        raise UsageError("train needs a dataset (--data or 'data = ...' in the config)")
    return tcfg, model_vals, paths


def cmd_train(args) -> int:
    tcfg, mv, paths = _train_settings(args)
    index = load_index(paths["data"], "train")
    mean, std = channel_stats(index)
    ds = SegmentationDataset(index, mean, std)
    val_index = load_index(paths["data"], "val")
    val_pairs = SegmentationDataset(val_index if len(val_index) else index, mean, std)
    aux = tuple(int(v) for v in str(mv["aux_layers"]).split(",") if v.strip()) or None
    try:
        enc = EncoderConfig(
            layers=mv["layers"],
            hidden=mv["hidden"],
            heads=mv["heads"],
            mlp_ratio=mv["mlp_ratio"],
            final_norm=mv["final_norm"],
            dropout=mv["dropout"],
        )
        mcfg = ModelConfig(
            enc,
            variant=mv["variant"],
            num_classes=index.num_classes,
            image_size=(tcfg.crop_size, tcfg.crop_size),
            patch_size=mv["patch_size"],
            decoder_width=mv["decoder_width"],
            mla_streams=mv["mla_streams"],
            aux_layers=aux,
            norm_mean=mean,
            norm_std=std,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model = build_model(mcfg, tcfg.seed)
    window = tcfg.crop_size

    def evaluate(m):
        pairs = (val_pairs[i] for i in range(len(val_pairs)))
        metrics, _, _ = evaluate_dataset(m.predict_logits, pairs, index.num_classes, window=window)
        return metrics.miou

    result = train_loop(model, ds, tcfg, evaluate, paths["log"], paths["checkpoint"])
    print(f"final loss {result.losses[-1]:.6f}; checkpoint {paths['checkpoint']}; log {paths['log']}")
    return 0


def _metrics_csv(metrics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "iou"])
    for k, v in enumerate(metrics.per_class):
        w.writerow([k, "" if v is None else f"{v:.6f}"])
    w.writerow(["miou", f"{metrics.miou:.6f}"])
    w.writerow(["pixel_acc", f"{metrics.pixel_acc:.6f}"])
    return buf.getvalue()


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    index = load_index(args.data, args.split)
    if len(index) == 0:
        raise UsageError(f"split {args.split!r} of {args.data} is empty")
    if index.num_classes != model.cfg.num_classes:
        raise RuntimeError(f"dataset has {index.num_classes} classes, model {model.cfg.num_classes}")
    window = args.window or model.cfg.image_size[0]
    stride = args.stride or default_stride(window)
    pairs = []
    for i in range(len(index)):
        rgb, lab = load_raw_pair(index, i)
        pairs.append((model.normalize(rgb), lab))
    metrics, cm, preds = evaluate_dataset(
        model.predict_logits, pairs, index.num_classes, args.scales, args.flip, window, stride, args.average
    )
    if args.pred_dir:
        out = Path(args.pred_dir)
        out.mkdir(parents=True, exist_ok=True)
        for path, pred, (img, _) in zip(index.images, preds, pairs):
            sio.write_pgm(out / f"{path.stem}.pgm", pred.astype(np.uint8 if index.num_classes <= 256 else np.uint16))
            if args.dump_logits:
                scores = multi_scale_logits(model.predict_logits, img, args.scales, args.flip, window, stride, args.average)
                sio.save_tensor(out / f"{path.stem}.sttn", scores.astype(np.float32))
    text = _metrics_csv(metrics)
    if args.csv:
        Path(args.csv).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    img = model.normalize(sio.read_ppm(args.image))
    window = args.window or model.cfg.image_size[0]
    stride = args.stride or default_stride(window)
    scores = multi_scale_logits(model.predict_logits, img, args.scales, args.flip, window, stride)
    pred = scores.argmax(axis=-1)
    sio.write_pgm(args.out, pred.astype(np.uint8 if model.cfg.num_classes <= 256 else np.uint16))
    if args.logits:
        sio.save_tensor(args.logits, scores.astype(np.float32))
    print(f"wrote {args.out}")
    return 0


def cmd_viz(args) -> int:
    from . import tensor as T

    model = load_checkpoint(args.checkpoint)
    img = model.normalize(sio.read_ppm(args.image))
    p = model.cfg.patch_size
    if img.shape[0] % p or img.shape[1] % p:
        raise UsageError(f"image size {img.shape[:2]} is not divisible by the patch size {p}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.eval()
    with T.no_grad():
        res = model(img[None], keep_attention=True, with_aux=False)
    stack = res.features.attention
    grid = (img.shape[0] // p, img.shape[1] // p)
    written = []
    point = args.point or (grid[0] // 2, grid[1] // 2)
    try:
        sio.write_pgm(out / f"attn_layer{args.layer}_{point[0]}_{point[1]}.pgm",
                      viz.point_attention_map(stack, args.layer, point, grid))
        written.append(f"attn_layer{args.layer}")
        if args.rollout:
            roll = viz.attention_rollout(stack, model.cfg.encoder.layers)
            sio.write_pgm(out / f"rollout_{point[0]}_{point[1]}.pgm", viz.rollout_point_map(roll, point, grid))
            written.append("rollout")
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.pos_sim:
        sio.write_pgm(out / "pos_similarity.pgm", viz.pos_embed_similarity(model.embed.pos.data))
        written.append("pos_similarity")
    for name in args.feature:
        kind, num = name[:1].lower(), name[1:]
        if kind not in "zu" or not num.isdigit():
            raise UsageError(f"--feature expects zN or uN, got {name!r}")
        n = int(num)
        if kind == "z":
            if not 1 <= n <= len(res.features):
                raise UsageError(f"encoder has layers 1..{len(res.features)}, not {n}")
            fmap = res.features[n].data[0].reshape(grid + (-1,))
        else:
            ups = getattr(model.decoder, "upsampled", None)
            if not ups:
                raise UsageError("uN features exist only for the PUP decoder")
            maps = [u.data[0] for u in ups] + [res.logits.data[0]]
            if not 1 <= n <= len(maps):
                raise UsageError(f"PUP features are u1..u{len(maps)}, not {name}")
            fmap = maps[n - 1]
        sio.write_pgm(out / f"feature_{kind}{n}_{args.reduction}.pgm", viz.render_feature(fmap, args.reduction))
        written.append(f"{kind}{n}")
    seg = res.logits.data[0].argmax(-1)
    sio.write_ppm(out / "prediction.ppm", viz.colorize(seg, model.cfg.num_classes))
    print("wrote " + ", ".join(written) + f" to {out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "viz": cmd_viz,
}


def _thread_limit():
    raw = os.environ.get("SEQ2SEG_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = max(1, int(raw))
    except ValueError:
        raise UsageError(f"SEQ2SEG_THREADS must be an integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        with _thread_limit():
            return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except (OSError, ValueError, RuntimeError, KeyError, ArithmeticError) as exc:
        sys.stderr.write(f"seq2seg: error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())

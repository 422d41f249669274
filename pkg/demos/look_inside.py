"""Render what a trained model attends to.

Writes attention rollout for one token, the position-embedding similarity
mosaic, the first principal component of a few encoder layers and the
PUP upsampling stages as PGM files.

    python3 demos/look_inside.py CHECKPOINT IMAGE.ppm OUT_DIR
"""

import sys
from pathlib import Path

from seq2seg import io as sio
from seq2seg import tensor as T
from seq2seg.model import load_checkpoint
from seq2seg.viz import attention_rollout, colorize, pos_embed_similarity, render_feature, rollout_point_map


def main(ckpt, image, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(ckpt).eval()
    rgb = sio.read_ppm(image)
    x = model.normalize(rgb)
    with T.no_grad():
        res = model(x[None], keep_attention=True, with_aux=False)
    gh, gw = rgb.shape[0] // 16, rgb.shape[1] // 16

    # centre token: where does information flow from once residuals are counted
    rollout = attention_rollout(res.features.attention)
    sio.write_pgm(out / "rollout_centre.pgm", rollout_point_map(rollout, (gh // 2, gw // 2), (gh, gw)))
    sio.write_pgm(out / "pos_similarity.pgm", pos_embed_similarity(model.embed.pos.data))

    for layer in range(1, len(res.features.layers) + 1):
        z = res.features[layer].data[0].reshape(gh, gw, -1)
        sio.write_pgm(out / f"z{layer}_pca1.pgm", render_feature(z, "pca1"))
    for i, u in enumerate(getattr(model.decoder, "upsampled", []), 1):
        sio.write_pgm(out / f"u{i}_mean.pgm", render_feature(u.data[0], "mean"))

    pred = res.logits.data[0].argmax(-1)
    sio.write_ppm(out / "prediction.ppm", colorize(pred, model.cfg.num_classes))
    print("\n".join(sorted(p.name for p in out.iterdir())))


if __name__ == "__main__":
    if len(sys.argv) != 4:
        sys.exit(__doc__)
    main(*sys.argv[1:])

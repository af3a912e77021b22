#!/usr/bin/env python3
"""Render which patches merged together, per probed layer.

Runs a small model on a synthetic clip under a merge plan.  For each
layer the full merge cascade is replayed using only that layer's key
projection, and the final grouping is written as per-frame overlays:
every patch is tinted with the color of its surviving token, so regions
sharing a tint were merged.  Token counts match across probes; the
groupings show how much each layer's key space changes the outcome.

Example:
    python3 scripts/render_merge_maps.py --out /tmp/maps --r 6
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import tokmerge as tm


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("merge_maps"))
    ap.add_argument("--r", type=int, default=6, help="tokens merged per layer")
    ap.add_argument("--layers", type=int, default=4)
    ap.add_argument("--image-size", type=int, default=96)
    ap.add_argument("--frames", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    cfg = tm.ModelConfig(
        attention_mode=tm.JOINT, layers=args.layers, embed_dim=64, heads=4,
        frames=args.frames, tubelet_t=1, patch=16,
        image_size=args.image_size, has_class_token=True,
        proportional_attention=True, num_classes=10)
    weights = tm.init_synthetic_weights(cfg, args.seed)
    video = tm.synthetic_video(cfg, args.seed)
    plan = tm.ReductionPlan(tm.build_schedule("constant", args.r, cfg.layers))

    print(f"{cfg.seq_len} tokens, merging {args.r} per layer "
          f"for {cfg.layers} layers")
    for layer in range(cfg.layers):
        state = tm.layer_probe(cfg, weights, plan, layer, video)
        layer_dir = args.out / f"layer_{layer:02d}"
        paths = tm.render_clusters(state, video, cfg, layer_dir)
        print(f"  probe layer {layer}: {len(state):>4} tokens "
              f"-> {len(paths)} frames in {layer_dir}")

    logits, state, counts = tm.forward(video, weights, cfg, plan=plan)
    print(f"token counts per layer: {counts}")
    print(f"argmax logit: {int(logits.argmax())}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""Sweep per-layer reduction counts and report predicted speedups.

By default this only evaluates the FLOP model, which is instant.  With
--measure it also times real forward passes on synthetic weights and
video, which takes minutes at the reference scale on one core.

Example:
    python3 scripts/run_speedup_sweep.py --preset reference --out sweep.csv
    python3 scripts/run_speedup_sweep.py --preset small --measure
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import tokmerge as tm
from tokmerge.analysis import write_sweep_csv

PRESETS = {
    # 32-frame, 224x224, 12-layer joint-attention model: 3137 tokens.
    "reference": tm.ModelConfig(
        attention_mode=tm.JOINT, layers=12, embed_dim=768, heads=12,
        frames=32, tubelet_t=2, patch=16, image_size=224,
        has_class_token=True, proportional_attention=True, num_classes=400),
    # Same geometry at a quarter of the width, for quick runs.
    "small": tm.ModelConfig(
        attention_mode=tm.JOINT, layers=12, embed_dim=192, heads=3,
        frames=32, tubelet_t=2, patch=16, image_size=224,
        has_class_token=True, proportional_attention=True, num_classes=400),
    # Divided space-time attention over 8 frames.
    "divided": tm.ModelConfig(
        attention_mode=tm.DIVIDED, layers=12, embed_dim=768, heads=12,
        frames=8, tubelet_t=1, patch=16, image_size=224,
        has_class_token=False, proportional_attention=True, num_classes=400),
}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", choices=sorted(PRESETS), default="reference")
    ap.add_argument("--schedule", choices=tm.SCHEDULE_KINDS, default="constant")
    ap.add_argument("--r-values", type=int, nargs="+",
                    default=[0, 50, 100, 150, 200, 250, 300],
                    help="per-layer r values to sweep")
    ap.add_argument("--measure", action="store_true",
                    help="also time real forward passes (slow)")
    ap.add_argument("--iters", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=None,
                    help="optional CSV path (r_fraction, predicted, measured)")
    args = ap.parse_args(argv)

    cfg = PRESETS[args.preset]
    unprotected = cfg.seq_len - (1 if cfg.has_class_token else 0)
    if cfg.attention_mode == tm.DIVIDED:
        unprotected = cfg.tokens_per_frame

    weights = video = baseline = None
    if args.measure:
        print(f"initialising synthetic weights (seed {args.seed})...")
        weights = tm.init_synthetic_weights(cfg, args.seed)
        video = tm.synthetic_video(cfg, args.seed)
        baseline = tm.run_benchmark(cfg, weights, None, iters=args.iters,
                                    warmup=1, video=video)
        print(f"baseline: {baseline.wall_seconds:.3f} s/clip "
              f"({baseline.frames_per_second:.2f} fps)")

    rows = []
    print(f"{'r':>5} {'r/S':>7} {'predicted':>10} {'measured':>9}")
    for r in args.r_values:
        plan = (tm.ReductionPlan(tm.build_schedule(args.schedule, r, cfg.layers))
                if r else None)
        predicted = tm.count_flops(cfg, plan).predicted_speedup
        measured = float("nan")
        if args.measure:
            bench = tm.run_benchmark(cfg, weights, plan, iters=args.iters,
                                     warmup=1, video=video,
                                     baseline_wall=baseline.wall_seconds)
            measured = bench.measured_speedup
        frac = r / unprotected
        rows.append((frac, predicted, measured if args.measure else 1.0))
        meas_txt = f"{measured:9.3f}" if args.measure else "        -"
        print(f"{r:>5} {frac:>7.3f} {predicted:>10.3f} {meas_txt}")

    if args.out is not None:
        write_sweep_csv(args.out, rows)
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

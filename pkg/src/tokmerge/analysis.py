"""Measurement harness: FLOP accounting, wall-clock benchmarks, cluster
visualization, and machine-readable result files.

FLOP convention, used consistently everywhere: one multiply-add counts as
2 FLOPs.  Per layer, attention costs 8*S*D^2 (QKV and output projections)
plus 4*S^2*D (score and value products), the MLP costs 4*S*D*hidden on
the post-reduction count, and bipartite matching costs one |A| x |B| key
similarity product.  Constant-cost parts (patch embedding, readout) are
excluded; they are identical across plans.
"""

from __future__ import annotations

import colorsys
import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import model_io
from .merging import ReductionPlan, TokenState
from .transformer import JOINT, ModelConfig, forward, patch_slot_cell

_GOLDEN = 0.6180339887498949   # golden ratio conjugate, drives the hue walk
_DROPPED_GRAY = (128, 128, 128)


class LayerFlops(NamedTuple):
    attention: int
    mlp: int
    merge: int


@dataclass
class FlopReport:
    """Per-layer and total FLOPs for one plan, against the same model
    without reduction."""

    per_layer: list[LayerFlops]
    total: int
    baseline_total: int
    predicted_speedup: float


@dataclass
class BenchResult:
    """One benchmarked configuration: median wall time and throughput."""

    config_hash: str
    wall_seconds: float
    clips_per_second: float
    frames_per_second: float
    measured_speedup: float
    per_layer_counts: list[int]


def config_hash(cfg: ModelConfig, plan: ReductionPlan | None) -> str:
    """Stable short hash over the model and plan fields."""
    blob = json.dumps({"model": asdict(cfg),
                       "plan": asdict(plan) if plan is not None else None},
                      sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _zero_plan(cfg: ModelConfig) -> ReductionPlan:
    return ReductionPlan(r_per_layer=(0,) * cfg.layers)


def count_flops(cfg: ModelConfig, plan: ReductionPlan | None) -> FlopReport:
    """Model the forward-pass cost of a plan layer by layer.

    Attention is charged at the pre-reduction token count, the MLP at the
    post-reduction count, and matching at one A-against-B similarity
    product per reduced layer (per frame in divided mode).
    """
    if plan is None:
        plan = _zero_plan(cfg)
    if plan.layers != cfg.layers:
        raise ValueError(f"plan covers {plan.layers} layers, model has {cfg.layers}")
    d = cfg.embed_dim
    hid = cfg.mlp_hidden
    hd = cfg.head_dim
    per_layer: list[LayerFlops] = []

    if cfg.attention_mode == JOINT:
        s = cfg.seq_len
        protected = 1 if cfg.has_class_token else 0
        for r in plan.r_per_layer:
            u = s - protected
            eff = min(int(r), u // 2)
            attn = 8 * s * d * d + 4 * s * s * d
            merge = 2 * (u - u // 2) * (u // 2) * hd if eff > 0 else 0
            s -= eff
            mlp = 4 * s * d * hid
            per_layer.append(LayerFlops(attn, mlp, merge))
    else:
        f = cfg.frames
        p = cfg.tokens_per_frame
        for r in plan.r_per_layer:
            eff = min(int(r), p // 2)
            attn = (16 * f * p * d * d          # QKV + proj, temporal and spatial
                    + 4 * p * f * f * d         # temporal scores and values
                    + 4 * f * p * p * d)        # spatial scores and values
            merge = f * 2 * (p - p // 2) * (p // 2) * hd if eff > 0 else 0
            p -= eff
            mlp = 4 * f * p * d * hid
            per_layer.append(LayerFlops(attn, mlp, merge))

    total = sum(a + m + g for a, m, g in per_layer)
    baseline = count_flops(cfg, None).total if any(plan.r_per_layer) else total
    return FlopReport(per_layer=per_layer, total=total, baseline_total=baseline,
                      predicted_speedup=baseline / total)


def synthetic_video(cfg: ModelConfig, seed: int = 0) -> np.ndarray:
    """Seeded uniform-noise clip shaped for the config, values in [0, 1)."""
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    shape = (cfg.frames, cfg.image_size, cfg.image_size, 3)
    return rng.random(shape, dtype=np.float32)


def run_benchmark(cfg: ModelConfig, weights: dict[str, np.ndarray],
                  plan: ReductionPlan | None, iters: int = 5, warmup: int = 1,
                  baseline_wall: float | None = None,
                  video: np.ndarray | None = None,
                  video_seed: int = 0) -> BenchResult:
    """Time repeated single-clip forward passes and report the median.

    The median over ``iters`` timed runs (after ``warmup`` untimed ones)
    is robust to scheduler jitter.  ``baseline_wall`` is the median wall
    time of the reduction-free model; when given, measured_speedup is
    baseline_wall over this run's median.
    """
    if iters < 3:
        raise ValueError("iters must be >= 3 for a meaningful median")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    if video is None:
        video = synthetic_video(cfg, video_seed)
    for _ in range(warmup):
        forward(video, weights, cfg, plan)
    times = []
    counts: list[int] = []
    for _ in range(iters):
        t0 = time.perf_counter()
        _, _, counts = forward(video, weights, cfg, plan)
        times.append(time.perf_counter() - t0)
    wall = float(np.median(times))
    return BenchResult(
        config_hash=config_hash(cfg, plan),
        wall_seconds=wall,
        clips_per_second=1.0 / wall,
        frames_per_second=cfg.frames / wall,
        measured_speedup=(baseline_wall / wall) if baseline_wall else 1.0,
        per_layer_counts=counts,
    )


def cluster_colors(n: int) -> list[tuple[int, int, int]]:
    """n distinct colors: a golden-ratio hue walk at fixed saturation and
    value, deterministic in the token index.

    Channels are kept even so an alpha-0.5 blend over black preserves
    distinctness; the rare palette collision linear-probes a 21-bit code.
    """
    used: set[int] = set()
    out: list[tuple[int, int, int]] = []
    for i in range(n):
        hue = (i * _GOLDEN) % 1.0
        r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 0.95)
        code = (int(r * 127.5) << 14) | (int(g * 127.5) << 7) | int(b * 127.5)
        while code in used:
            code = (code - 1) % (1 << 21)
        used.add(code)
        out.append((2 * ((code >> 14) & 127), 2 * ((code >> 7) & 127), 2 * (code & 127)))
    return out


def render_clusters(state: TokenState, video: np.ndarray, cfg: ModelConfig,
                    out_dir) -> list[Path]:
    """Write one PPM per frame with each patch tinted by its token's color.

    Colors come from ``cluster_colors`` keyed by final token index and are
    alpha-blended (0.5) over the source pixels; patches no token claims
    (dropped) are tinted gray.  Returns the written paths in frame order.
    """
    video = np.asarray(video)
    expected = (cfg.frames, cfg.image_size, cfg.image_size, 3)
    if video.shape != expected:
        raise ValueError(f"video dims {video.shape} do not match config {expected}")
    offset = 1 if cfg.has_class_token else 0
    owner = np.full(cfg.num_patch_tokens, -1, dtype=np.int64)
    for ti, tr in enumerate(state.trace):
        for slot in tr:
            patch = slot - offset
            if patch >= cfg.num_patch_tokens:
                raise ValueError(f"trace slot {slot} outside the patch grid")
            if patch >= 0:
                owner[patch] = ti
    colors = cluster_colors(len(state))

    base = np.clip(np.rint(video.astype(np.float64) * 255.0), 0, 255).astype(np.float64)
    p = cfg.patch
    for slot in range(cfg.num_patch_tokens):
        t_idx, row, col = patch_slot_cell(cfg, slot)
        color = colors[owner[slot]] if owner[slot] >= 0 else _DROPPED_GRAY
        tint = np.array(color, dtype=np.float64)
        f0 = t_idx * cfg.tubelet_t
        for fr in range(f0, f0 + cfg.tubelet_t):
            region = base[fr, row * p:(row + 1) * p, col * p:(col + 1) * p]
            region[:] = np.rint(0.5 * region + 0.5 * tint)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    frames_u8 = base.astype(np.uint8)
    for fr in range(cfg.frames):
        path = out / f"frame_{fr:04d}.ppm"
        model_io.write_ppm(path, frames_u8[fr])
        paths.append(path)
    return paths


def format_results(cfg: ModelConfig, plan: ReductionPlan | None,
                   bench: BenchResult, flops: FlopReport) -> dict[str, str]:
    """Key/value lines for one run's machine-readable results file."""
    return {
        "config_hash": bench.config_hash,
        "fps": f"{bench.frames_per_second:.6f}",
        "clips_per_second": f"{bench.clips_per_second:.6f}",
        "wall_seconds": f"{bench.wall_seconds:.9f}",
        "speedup": f"{bench.measured_speedup:.6f}",
        "predicted_speedup": f"{flops.predicted_speedup:.6f}",
        "flops": str(flops.total),
        "baseline_flops": str(flops.baseline_total),
        "token_counts": ",".join(str(c) for c in bench.per_layer_counts),
    }


def write_results(path, results: dict[str, str]) -> None:
    """Write one key=value line per entry."""
    text = "".join(f"{k}={v}\n" for k, v in results.items())
    Path(path).write_text(text, encoding="ascii")


def read_results(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="ascii").splitlines():
        if line:
            k, _, v = line.partition("=")
            out[k] = v
    return out


def write_sweep_csv(path, rows: list[tuple[float, float, float]]) -> None:
    """Plot-data CSV: one (r_fraction, predicted_speedup, measured_speedup)
    row per swept plan."""
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["r_fraction", "predicted_speedup", "measured_speedup"])
        for frac, pred, meas in rows:
            writer.writerow([f"{frac:.6f}", f"{pred:.6f}", f"{meas:.6f}"])

"""Command-line front end.

Subcommands: bench, forward, viz, probe, schedule, genweights.  Every
subcommand takes an INI run config with [model], [plan] and [io] sections.
Exit codes: 0 success, 1 user error (bad flags, config, or input files),
2 internal invariant violation.  The TOKMERGE_THREADS environment
variable caps BLAS threads (default 1, keeping benchmarks single-threaded).
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import analysis, model_io
from .merging import (SCHEDULE_KINDS, STRATEGIES, ReductionPlan, build_schedule,
                      token_count_trajectory)
from .transformer import (JOINT, ModelConfig, NonFiniteActivationError, forward,
                          init_synthetic_weights, layer_probe)

EXIT_OK = 0
EXIT_USER = 1
EXIT_INTERNAL = 2


class UserError(Exception):
    """A problem the user can fix: bad config, flags, or input files."""


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage by default; this maps it to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


_MODEL_KEYS = {
    "attention_mode": str,
    "layers": int,
    "embed_dim": int,
    "heads": int,
    "frames": int,
    "tubelet_t": int,
    "patch": int,
    "image_size": int,
    "has_class_token": _parse_bool,
    "proportional_attention": _parse_bool,
    "num_classes": int,
    "mlp_ratio": float,
}
_MODEL_OPTIONAL = {"mlp_ratio"}

_PLAN_KEYS = {
    "strategy": str,
    "schedule": str,
    "r": int,
    "hybrid_threshold": float,
    "seed": int,
}
_PLAN_OPTIONAL = {"hybrid_threshold", "seed"}

_IO_KEYS = {"weights": str, "video_dir": str, "out_dir": str}


@dataclass
class RunSpec:
    """Everything a subcommand can need, parsed from one config file."""

    model: ModelConfig
    strategy: str | None = None
    schedule: str | None = None
    r: int | None = None
    hybrid_threshold: float | None = None
    seed: int | None = None
    weights: str | None = None
    video_dir: str | None = None
    out_dir: str | None = None

    def plan_for_r(self, r: int) -> ReductionPlan:
        if self.strategy is None or self.schedule is None:
            raise UserError("missing section [plan] in config")
        try:
            per_layer = build_schedule(self.schedule, r, self.model.layers)
            return ReductionPlan(
                r_per_layer=tuple(per_layer),
                strategy=self.strategy,
                hybrid_threshold=self.hybrid_threshold,
                rng_seed=self.seed,
            )
        except ValueError as e:
            raise UserError(f"bad [plan] section: {e}") from None

    def plan(self) -> ReductionPlan:
        if self.r is None:
            raise UserError("missing required key 'r' in [plan]")
        return self.plan_for_r(self.r)

    def io_path(self, key: str) -> str:
        value = getattr(self, key)
        if value is None:
            raise UserError(f"missing required key '{key}' in [io]")
        return value


def _parse_section(cp: configparser.ConfigParser, section: str, keys: dict,
                   optional: set, required: bool) -> dict:
    if section not in cp:
        if required:
            raise UserError(f"missing section [{section}] in config")
        return {}
    out = {}
    for key, value in cp[section].items():
        if key not in keys:
            raise UserError(f"unknown key '{key}' in [{section}]")
        try:
            out[key] = keys[key](value)
        except ValueError:
            raise UserError(
                f"bad value {value!r} for key '{key}' in [{section}]") from None
    if required:
        for key in keys:
            if key in optional or key in out:
                continue
            raise UserError(f"missing required key '{key}' in [{section}]")
    return out


def load_run_spec(path, need_plan: bool = True) -> RunSpec:
    """Parse and validate a run config file.

    Unknown sections and keys are rejected; missing required keys are
    reported by name.
    """
    p = Path(path)
    if not p.is_file():
        raise UserError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        cp.read(p)
    except configparser.Error as e:
        raise UserError(f"config parse error: {e}") from None
    for section in cp.sections():
        if section not in ("model", "plan", "io"):
            raise UserError(f"unknown section [{section}] in config")

    model_kw = _parse_section(cp, "model", _MODEL_KEYS, _MODEL_OPTIONAL, required=True)
    try:
        model = ModelConfig(**model_kw)
    except ValueError as e:
        raise UserError(f"bad [model] section: {e}") from None

    plan_kw = _parse_section(cp, "plan", _PLAN_KEYS, _PLAN_OPTIONAL, required=need_plan)
    if "strategy" in plan_kw and plan_kw["strategy"] not in STRATEGIES:
        raise UserError(
            f"bad value {plan_kw['strategy']!r} for key 'strategy' in [plan]; "
            f"expected one of {', '.join(STRATEGIES)}")
    if "schedule" in plan_kw and plan_kw["schedule"] not in SCHEDULE_KINDS:
        raise UserError(
            f"bad value {plan_kw['schedule']!r} for key 'schedule' in [plan]; "
            f"expected one of {', '.join(SCHEDULE_KINDS)}")

    io_kw = _parse_section(cp, "io", _IO_KEYS, set(_IO_KEYS), required=False)
    return RunSpec(model=model, **plan_kw, **io_kw)


def _cap_threads() -> int:
    raw = os.environ.get("TOKMERGE_THREADS", "1")
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UserError(
            f"TOKMERGE_THREADS must be a positive integer, got {raw!r}") from None
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=n)
    except ImportError:  # pragma: no cover - dependency is declared
        pass
    return n


def _initial_unprotected(cfg: ModelConfig) -> int:
    if cfg.attention_mode == JOINT:
        return cfg.num_patch_tokens
    return cfg.tokens_per_frame


def _out_dir(spec: RunSpec) -> Path:
    out = Path(spec.io_path("out_dir"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_weights(spec: RunSpec):
    return model_io.read_weights(spec.io_path("weights"), spec.model)


def cmd_bench(args) -> int:
    spec = load_run_spec(args.config)
    if args.iters < 3:
        raise UserError("--iters must be >= 3")
    if args.warmup < 0:
        raise UserError("--warmup must be >= 0")
    cfg = spec.model
    weights = _load_weights(spec)
    out = _out_dir(spec)

    if args.sweep:
        try:
            sweep = [int(tok) for tok in args.sweep.split(",") if tok.strip() != ""]
        except ValueError:
            raise UserError(f"--sweep must be comma-separated integers, got {args.sweep!r}") from None
    else:
        if spec.r is None:
            raise UserError("missing required key 'r' in [plan]")
        sweep = [spec.r]

    baseline = analysis.run_benchmark(cfg, weights, None, iters=args.iters,
                                      warmup=args.warmup, video_seed=args.input_seed)

    def run_one(r: int):
        plan = spec.plan_for_r(r) if r > 0 else None
        flops = analysis.count_flops(cfg, plan)
        if r > 0:
            bench = analysis.run_benchmark(cfg, weights, plan, iters=args.iters,
                                           warmup=args.warmup,
                                           baseline_wall=baseline.wall_seconds,
                                           video_seed=args.input_seed)
        else:
            bench = baseline
        return r, plan, flops, bench

    if args.no_isolation and len(sweep) > 1:
        with ThreadPoolExecutor(max_workers=min(4, len(sweep))) as ex:
            results = list(ex.map(run_one, sweep))
    else:
        results = [run_one(r) for r in sweep]

    denom = _initial_unprotected(cfg)
    rows = []
    for r, plan, flops, bench in results:
        analysis.write_results(out / f"run_{bench.config_hash}.txt",
                               analysis.format_results(cfg, plan, bench, flops))
        rows.append((r / denom, flops.predicted_speedup, bench.measured_speedup))
        print(f"r={r} fps={bench.frames_per_second:.3f} "
              f"speedup={bench.measured_speedup:.3f} "
              f"predicted={flops.predicted_speedup:.3f}")
    analysis.write_sweep_csv(out / "sweep.csv", rows)
    print(f"wrote {out / 'sweep.csv'}")
    return EXIT_OK


def _run_forward(spec: RunSpec):
    cfg = spec.model
    weights = _load_weights(spec)
    video = model_io.load_video_ppm(spec.io_path("video_dir"), cfg)
    plan = spec.plan()
    logits, state, counts = forward(video, weights, cfg, plan)
    return cfg, weights, video, plan, logits, state, counts


def cmd_forward(args) -> int:
    spec = load_run_spec(args.config)
    cfg, _, _, plan, logits, state, counts = _run_forward(spec)
    out = _out_dir(spec)
    model_io.write_tensor(out / "logits.vten", logits)
    analysis.write_results(out / "forward.txt", {
        "config_hash": analysis.config_hash(cfg, plan),
        "token_counts": ",".join(str(c) for c in counts),
        "final_tokens": str(len(state)),
        "logits_argmax": str(int(logits.argmax())),
    })
    print("token_counts=" + ",".join(str(c) for c in counts))
    print(f"wrote {out / 'logits.vten'}")
    return EXIT_OK


def cmd_viz(args) -> int:
    spec = load_run_spec(args.config)
    cfg, _, video, _, _, state, _ = _run_forward(spec)
    paths = analysis.render_clusters(state, video, cfg, _out_dir(spec))
    print(f"wrote {len(paths)} frames to {_out_dir(spec)}")
    return EXIT_OK


def cmd_probe(args) -> int:
    spec = load_run_spec(args.config)
    cfg = spec.model
    if not 0 <= args.layer < cfg.layers:
        raise UserError(f"--layer must be in [0, {cfg.layers}), got {args.layer}")
    weights = _load_weights(spec)
    video = model_io.load_video_ppm(spec.io_path("video_dir"), cfg)
    state = layer_probe(cfg, weights, spec.plan(), args.layer, video)
    out = _out_dir(spec) / f"layer_{args.layer:02d}"
    paths = analysis.render_clusters(state, video, cfg, out)
    print(f"probe layer {args.layer}: {len(state)} final tokens, "
          f"{len(paths)} frames in {out}")
    return EXIT_OK


def cmd_schedule(args) -> int:
    spec = load_run_spec(args.config)
    cfg = spec.model
    plan = spec.plan()
    print("r_per_layer=" + ",".join(str(r) for r in plan.r_per_layer))
    if cfg.attention_mode == JOINT:
        protected = 1 if cfg.has_class_token else 0
        counts = token_count_trajectory(cfg.seq_len, plan, protected)
        print("token_counts=" + ",".join(str(c) for c in counts))
    else:
        per_frame = token_count_trajectory(cfg.tokens_per_frame, plan)
        print("per_frame_counts=" + ",".join(str(c) for c in per_frame))
        print("token_counts=" + ",".join(str(cfg.frames * c) for c in per_frame))
    return EXIT_OK


def cmd_genweights(args) -> int:
    spec = load_run_spec(args.config, need_plan=False)
    path = Path(spec.io_path("weights"))
    path.parent.mkdir(parents=True, exist_ok=True)
    weights = init_synthetic_weights(spec.model, args.seed)
    model_io.write_weights(path, weights)
    print(f"wrote {len(weights)} tensors to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tokmerge",
                     description="Token-merging video transformer bench and analysis tool.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command",
                                parser_class=_Parser)

    def add(name: str, func, help_text: str):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("config", help="run config file (INI: [model], [plan], [io])")
        sp.set_defaults(func=func)
        return sp

    bench = add("bench", cmd_bench,
                "benchmark forward passes; writes per-run results and a sweep CSV")
    bench.add_argument("--iters", type=int, default=5, help="timed runs per plan (median is reported)")
    bench.add_argument("--warmup", type=int, default=1, help="untimed runs before timing")
    bench.add_argument("--sweep", help="comma-separated r values to sweep (0 = baseline)")
    bench.add_argument("--input-seed", type=int, default=0,
                       help="seed for the synthetic benchmark clip")
    bench.add_argument("--no-isolation", action="store_true",
                       help="run sweep plans concurrently; timings lose wall-clock isolation")

    add("forward", cmd_forward, "run one clip and write logits and token counts")
    add("viz", cmd_viz, "run one clip and render token clusters over the frames")

    probe = add("probe", cmd_probe,
                "reduce with one layer's keys at every step, then render the clusters")
    probe.add_argument("--layer", type=int, required=True, help="layer whose keys drive all merging")

    add("schedule", cmd_schedule, "print the per-layer r schedule and the token trajectory")

    gen = add("genweights", cmd_genweights, "write synthetic seeded weights for the model")
    gen.add_argument("--seed", type=int, default=0, help="PRNG seed for the weights")
    return parser


def main(argv=None) -> int:
    try:
        _cap_threads()
        parser = build_parser()
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:
            return int(e.code or 0)
        return args.func(args)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    except (model_io.FormatError, NonFiniteActivationError,
            FileNotFoundError, NotADirectoryError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    except Exception as e:  # noqa: BLE001 - anything else is a bug in this tool
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

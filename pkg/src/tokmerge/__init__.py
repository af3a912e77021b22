"""Training-free spatio-temporal token merging for video transformers.

The package bundles a small, fully deterministic CPU inference engine
(joint or divided space-time attention) whose layers can merge, drop, or
randomly reduce tokens mid-forward, plus the analysis harness that checks
the resulting FLOP and wall-clock speedups and renders which patches ended
up merged together.
"""

from .analysis import (BenchResult, FlopReport, cluster_colors, config_hash,
                       count_flops, render_clusters, run_benchmark,
                       synthetic_video)
from .merging import (SCHEDULE_KINDS, STRATEGIES, BipartiteMatch,
                      ReductionPlan, TokenState, bipartite_soft_match,
                      build_schedule, drop_selected, merge_selected,
                      partition_alternating, reduce_layer,
                      token_count_trajectory)
from .model_io import (BadMagicError, FormatError, TooFewFramesError,
                       TruncatedError, load_video_ppm, read_ppm, read_tensor,
                       read_weights, write_ppm, write_tensor, write_weights)
from .transformer import (DIVIDED, JOINT, ModelConfig,
                          NonFiniteActivationError, forward,
                          init_synthetic_weights, layer_probe, patch_embed,
                          proportional_attention, validate_weights,
                          weights_schema)

__version__ = "0.1.0"

__all__ = [
    "BadMagicError", "BenchResult", "BipartiteMatch", "DIVIDED", "FlopReport",
    "FormatError", "JOINT", "ModelConfig", "NonFiniteActivationError",
    "ReductionPlan", "SCHEDULE_KINDS", "STRATEGIES", "TokenState",
    "TooFewFramesError", "TruncatedError", "bipartite_soft_match",
    "build_schedule", "cluster_colors", "config_hash", "count_flops",
    "drop_selected", "forward", "init_synthetic_weights", "layer_probe",
    "load_video_ppm", "merge_selected", "partition_alternating", "patch_embed",
    "proportional_attention", "read_ppm", "read_tensor", "read_weights",
    "reduce_layer", "render_clusters", "run_benchmark", "synthetic_video",
    "token_count_trajectory", "validate_weights", "weights_schema",
    "write_ppm", "write_tensor", "write_weights",
]

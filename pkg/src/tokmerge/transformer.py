"""A minimal video transformer with per-layer token reduction hooks.

Two attention modes are supported: joint space-time (one attention over
all tubelet tokens, optionally with a class token) and divided space-time
(temporal attention, then spatial attention per frame, with reduction
applied per frame).  Attention is size-proportional: merged tokens carry
an additive log-size bias on the key axis so they attend like the patches
they represent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .merging import ReductionPlan, TokenState, reduce_layer

JOINT = "joint_space_time"
DIVIDED = "divided_space_time"


class NonFiniteActivationError(ArithmeticError):
    """Raised when a layer produces NaN or Inf activations."""

    def __init__(self, layer: int):
        self.layer = layer
        super().__init__(f"non-finite activations after layer {layer}")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of the video transformer under test."""

    attention_mode: str
    layers: int
    embed_dim: int
    heads: int
    frames: int
    tubelet_t: int
    patch: int
    image_size: int
    has_class_token: bool
    proportional_attention: bool
    num_classes: int
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.attention_mode not in (JOINT, DIVIDED):
            raise ValueError(f"unknown attention_mode: {self.attention_mode!r}")
        for name in ("layers", "embed_dim", "heads", "frames", "tubelet_t",
                     "patch", "image_size", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")
        if self.embed_dim % self.heads:
            raise ValueError("heads must divide embed_dim")
        if self.image_size % self.patch:
            raise ValueError("patch must divide image_size")
        if self.frames % self.tubelet_t:
            raise ValueError("tubelet_t must divide frames")
        if self.attention_mode == DIVIDED:
            if self.tubelet_t != 1:
                raise ValueError("divided attention requires tubelet_t=1")
            if self.has_class_token:
                raise ValueError("divided attention does not support a class token")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch

    @property
    def tokens_per_frame(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def time_steps(self) -> int:
        return self.frames // self.tubelet_t

    @property
    def num_patch_tokens(self) -> int:
        return self.time_steps * self.tokens_per_frame

    @property
    def seq_len(self) -> int:
        """Embedded token count, class token included."""
        return self.num_patch_tokens + (1 if self.has_class_token else 0)

    @property
    def patch_dim(self) -> int:
        return self.tubelet_t * self.patch * self.patch * 3

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


def patch_slot_cell(cfg: ModelConfig, slot: int) -> tuple[int, int, int]:
    """Map a patch slot (class token excluded) to (time_index, row, col).

    In joint mode a time index spans ``tubelet_t`` consecutive frames; in
    divided mode it is the frame index.
    """
    per = cfg.tokens_per_frame
    t_idx, rem = divmod(int(slot), per)
    row, col = divmod(rem, cfg.grid_size)
    return t_idx, row, col


def weights_schema(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name-to-shape map of every tensor the model needs."""
    d = cfg.embed_dim
    hid = cfg.mlp_hidden
    schema: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "patch_embed.bias": (d,),
    }
    if cfg.has_class_token:
        schema["cls_token"] = (d,)
    schema["pos_embed"] = (cfg.seq_len, d)
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        if cfg.attention_mode == DIVIDED:
            schema[p + "temporal_norm.gamma"] = (d,)
            schema[p + "temporal_norm.beta"] = (d,)
            schema[p + "temporal_attn.qkv.weight"] = (d, 3 * d)
            schema[p + "temporal_attn.qkv.bias"] = (3 * d,)
            schema[p + "temporal_attn.proj.weight"] = (d, d)
            schema[p + "temporal_attn.proj.bias"] = (d,)
        schema[p + "norm1.gamma"] = (d,)
        schema[p + "norm1.beta"] = (d,)
        schema[p + "attn.qkv.weight"] = (d, 3 * d)
        schema[p + "attn.qkv.bias"] = (3 * d,)
        schema[p + "attn.proj.weight"] = (d, d)
        schema[p + "attn.proj.bias"] = (d,)
        schema[p + "norm2.gamma"] = (d,)
        schema[p + "norm2.beta"] = (d,)
        schema[p + "mlp.fc1.weight"] = (d, hid)
        schema[p + "mlp.fc1.bias"] = (hid,)
        schema[p + "mlp.fc2.weight"] = (hid, d)
        schema[p + "mlp.fc2.bias"] = (d,)
    schema["norm.gamma"] = (d,)
    schema["norm.beta"] = (d,)
    schema["head.weight"] = (d, cfg.num_classes)
    schema["head.bias"] = (cfg.num_classes,)
    return schema


def validate_weights(weights: dict[str, np.ndarray], cfg: ModelConfig) -> None:
    """Reject missing, extra, or mis-shaped tensors for this config."""
    schema = weights_schema(cfg)
    missing = sorted(schema.keys() - weights.keys())
    extra = sorted(weights.keys() - schema.keys())
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing tensors: {', '.join(missing)}")
        if extra:
            parts.append(f"unexpected tensors: {', '.join(extra)}")
        raise ValueError("; ".join(parts))
    for name, shape in schema.items():
        got = weights[name]
        if tuple(got.shape) != shape:
            raise ValueError(f"tensor {name!r} has dims {tuple(got.shape)}, expected {shape}")
        if got.dtype != np.float32:
            raise ValueError(f"tensor {name!r} must be float32")


def init_synthetic_weights(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Seeded random weights with inference-stable scaling.

    Matrix weights are drawn N(0, 1/fan_in), norm gains sit near 1, and
    everything else is small noise, so deep stacks stay finite without any
    training.  The same seed always produces bit-identical tensors.
    """
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    weights: dict[str, np.ndarray] = {}
    for name, shape in weights_schema(cfg).items():
        draw = rng.standard_normal(shape)
        if name.endswith(".weight") and len(shape) == 2:
            arr = draw / math.sqrt(shape[0])
        elif name.endswith(".gamma"):
            arr = 1.0 + 0.02 * draw
        elif name in ("cls_token", "pos_embed"):
            arr = 0.02 * draw
        else:  # biases and .beta shifts
            arr = 0.02 * draw
        weights[name] = np.ascontiguousarray(arr, dtype=np.float32)
    return weights


def _tubelet_patches(video: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Flatten a clip into (num_patch_tokens, patch_dim) rows, ordered
    time-major then row-major within the frame grid."""
    t, p, g = cfg.tubelet_t, cfg.patch, cfg.grid_size
    v = video.reshape(cfg.time_steps, t, g, p, g, p, 3)
    v = v.transpose(0, 2, 4, 1, 3, 5, 6)
    return np.ascontiguousarray(v).reshape(cfg.num_patch_tokens, cfg.patch_dim)


def patch_embed(video: np.ndarray, weights: dict[str, np.ndarray],
                cfg: ModelConfig) -> TokenState:
    """Embed a clip: tubelet patches are projected, a class token is
    prepended when configured, and positional embeddings are added."""
    video = np.ascontiguousarray(video, dtype=np.float32)
    expected = (cfg.frames, cfg.image_size, cfg.image_size, 3)
    if video.shape != expected:
        raise ValueError(f"video dims {video.shape} do not match config {expected}")
    patches = _tubelet_patches(video, cfg)
    tokens = tc.matmul(patches, weights["patch_embed.weight"]) + weights["patch_embed.bias"]
    if cfg.has_class_token:
        tokens = np.vstack([weights["cls_token"][None, :], tokens])
    tokens = tokens + weights["pos_embed"]
    protected = (0,) if cfg.has_class_token else ()
    return TokenState.fresh(tokens, protected)


def _softmax_rows_inplace(scores: np.ndarray) -> None:
    """Row softmax over the last axis, in place on float32 scores.

    Same numerics as tensor_core.softmax_rows: shift by the row max, then
    normalise against a float64 row-sum accumulator.  Non-finite scores
    propagate as NaN and are caught by the per-layer activation check.
    """
    m = scores.max(axis=-1, keepdims=True)
    np.subtract(scores, m, out=scores)
    np.exp(scores, out=scores)
    denom = scores.sum(axis=-1, dtype=np.float64, keepdims=True)
    np.divide(scores, denom, out=scores)


def proportional_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                           sizes: np.ndarray, enabled: bool = True) -> np.ndarray:
    """Multi-head attention with an additive log-size bias on the key axis:
    softmax(QK^T / sqrt(d) + log n) V per head.

    q, k, v are (heads, S, head_dim); sizes is the per-token count n.
    With all sizes equal to 1 the bias is exactly zero and the output is
    bit-equal to vanilla attention.  Heads run one at a time through a
    single reused score buffer so peak memory and allocator traffic stay
    flat in the head count; the S x S products run in float32 with the
    softmax denominator in float64.
    """
    h, s, d = q.shape
    if k.shape != (h, s, d) or v.shape != (h, s, d):
        raise ValueError("q, k, v must share (heads, S, head_dim)")
    scale = np.float32(1.0 / math.sqrt(d))
    bias = None
    if enabled:
        bias = np.log(sizes.astype(np.float64)).astype(np.float32)[None, :]
    out = np.empty((s, h * d), dtype=np.float32)
    scores = np.empty((s, s), dtype=np.float32)
    for i in range(h):
        np.matmul(q[i], k[i].T, out=scores)
        scores *= scale
        if bias is not None:
            scores += bias
        _softmax_rows_inplace(scores)
        out[:, i * d:(i + 1) * d] = np.matmul(scores, v[i])
    return out


def _split_heads(qkv: np.ndarray, heads: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(S, 3D) -> three (heads, S, head_dim) stacks."""
    s, three_d = qkv.shape
    d = three_d // 3
    arr = qkv.reshape(s, 3, heads, d // heads).transpose(1, 2, 0, 3)
    return arr[0], arr[1], arr[2]


def _split_heads_frames(qkv: np.ndarray, heads: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(F, P, 3D) -> three (F, P, heads, head_dim) stacks."""
    f, p, three_d = qkv.shape
    d = three_d // 3
    arr = qkv.reshape(f, p, 3, heads, d // heads)
    return arr[:, :, 0], arr[:, :, 1], arr[:, :, 2]


def _attention_batched(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                       log_bias, scale: np.float32) -> np.ndarray:
    """Attention over trailing (S, d) axes with broadcast batch dims."""
    scores = np.matmul(q, np.swapaxes(k, -1, -2))
    scores *= scale
    if log_bias is not None:
        scores += log_bias
    _softmax_rows_inplace(scores)
    return np.matmul(scores, v)


def _readout(state: TokenState, weights: dict[str, np.ndarray],
             cfg: ModelConfig) -> np.ndarray:
    """Final norm, then class-token or size-weighted mean pooling."""
    x = tc.layer_norm(state.features, weights["norm.gamma"], weights["norm.beta"])
    if cfg.has_class_token:
        pooled = x[0]
    else:
        szs = state.sizes.astype(np.float64)
        pooled = ((x.astype(np.float64) * szs[:, None]).sum(axis=0) / szs.sum()).astype(np.float32)
    return tc.matmul(pooled[None, :], weights["head.weight"])[0] + weights["head.bias"]


def forward(video: np.ndarray, weights: dict[str, np.ndarray], cfg: ModelConfig,
            plan: ReductionPlan | None = None):
    """Run one clip through the model.

    Returns (logits, final_state, per_layer_counts).  The counts list
    starts at the embedded token count and then records the live count
    after every layer.  ``plan=None`` runs the merging-free model.
    """
    if plan is not None and plan.layers != cfg.layers:
        raise ValueError(f"plan covers {plan.layers} layers, model has {cfg.layers}")
    validate_weights(weights, cfg)
    if cfg.attention_mode == JOINT:
        return _forward_joint(video, weights, cfg, plan)
    return _forward_divided(video, weights, cfg, plan)


def _forward_joint(video, weights, cfg, plan):
    w = weights
    state = patch_embed(video, w, cfg)
    counts = [len(state)]
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        x = state.features
        h = tc.layer_norm(x, w[p + "norm1.gamma"], w[p + "norm1.beta"])
        qkv = tc.matmul(h, w[p + "attn.qkv.weight"]) + w[p + "attn.qkv.bias"]
        q, k, v = _split_heads(qkv, cfg.heads)
        attn = proportional_attention(q, k, v, state.sizes, cfg.proportional_attention)
        x = x + (tc.matmul(attn, w[p + "attn.proj.weight"]) + w[p + "attn.proj.bias"])
        state = state.with_features(x)
        if plan is not None:
            merge_keys = np.ascontiguousarray(k.mean(axis=0))  # (S, head_dim)
            state = reduce_layer(state, merge_keys, plan, i)
        counts.append(len(state))
        x = state.features
        h2 = tc.layer_norm(x, w[p + "norm2.gamma"], w[p + "norm2.beta"])
        hidden = tc.gelu(tc.matmul(h2, w[p + "mlp.fc1.weight"]) + w[p + "mlp.fc1.bias"])
        x = x + (tc.matmul(hidden, w[p + "mlp.fc2.weight"]) + w[p + "mlp.fc2.bias"])
        if not np.isfinite(x).all():
            raise NonFiniteActivationError(i)
        state = state.with_features(x)
    return _readout(state, w, cfg), state, counts


def _frame_states(full: TokenState, cfg: ModelConfig) -> list[TokenState]:
    p0 = cfg.tokens_per_frame
    return [
        TokenState(
            features=np.ascontiguousarray(full.features[j * p0:(j + 1) * p0]),
            sizes=full.sizes[j * p0:(j + 1) * p0].copy(),
            trace=list(full.trace[j * p0:(j + 1) * p0]),
            protected=frozenset(),
        )
        for j in range(cfg.frames)
    ]


def _concat_frames(frames: list[TokenState]) -> TokenState:
    return TokenState(
        features=np.ascontiguousarray(np.vstack([st.features for st in frames])),
        sizes=np.concatenate([st.sizes for st in frames]),
        trace=[t for st in frames for t in st.trace],
        protected=frozenset(),
    )


def _forward_divided(video, weights, cfg, plan):
    w = weights
    f, d, heads = cfg.frames, cfg.embed_dim, cfg.heads
    scale = np.float32(1.0 / math.sqrt(cfg.head_dim))
    frames = _frame_states(patch_embed(video, w, cfg), cfg)
    counts = [f * len(frames[0])]
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        pp = len(frames[0])
        flat = np.ascontiguousarray(
            np.vstack([st.features for st in frames]))       # (F*P, D)
        sizes = np.stack([st.sizes for st in frames])        # (F, P)
        log_n = None
        if cfg.proportional_attention:
            log_n = np.log(sizes.astype(np.float64)).astype(np.float32)

        # Temporal attention: index-aligned tokens across frames form the
        # sequences, one per surviving spatial slot.
        h = tc.layer_norm(flat, w[p + "temporal_norm.gamma"], w[p + "temporal_norm.beta"])
        qkv = tc.matmul(h, w[p + "temporal_attn.qkv.weight"]) + w[p + "temporal_attn.qkv.bias"]
        q, k, v = _split_heads_frames(qkv.reshape(f, pp, 3 * d), heads)
        qt, kt, vt = (a.transpose(1, 2, 0, 3) for a in (q, k, v))  # (P, H, F, hd)
        tbias = log_n.T[:, None, None, :] if log_n is not None else None
        tout = _attention_batched(qt, kt, vt, tbias, scale)
        tout = np.ascontiguousarray(tout.transpose(2, 0, 1, 3)).reshape(f * pp, d)
        flat = flat + (tc.matmul(tout, w[p + "temporal_attn.proj.weight"])
                       + w[p + "temporal_attn.proj.bias"])

        # Spatial attention within each frame.
        h = tc.layer_norm(flat, w[p + "norm1.gamma"], w[p + "norm1.beta"])
        qkv = tc.matmul(h, w[p + "attn.qkv.weight"]) + w[p + "attn.qkv.bias"]
        q, k, v = _split_heads_frames(qkv.reshape(f, pp, 3 * d), heads)
        qs, ks, vs = (a.transpose(0, 2, 1, 3) for a in (q, k, v))  # (F, H, P, hd)
        sbias = log_n[:, None, None, :] if log_n is not None else None
        sout = _attention_batched(qs, ks, vs, sbias, scale)
        sout = np.ascontiguousarray(sout.transpose(0, 2, 1, 3)).reshape(f * pp, d)
        flat = flat + (tc.matmul(sout, w[p + "attn.proj.weight"]) + w[p + "attn.proj.bias"])

        x = flat.reshape(f, pp, d)
        frames = [st.with_features(np.ascontiguousarray(x[j]))
                  for j, st in enumerate(frames)]
        if plan is not None:
            merge_keys = k.mean(axis=2)                       # (F, P, head_dim)
            frames = [reduce_layer(st, np.ascontiguousarray(merge_keys[j]), plan, i,
                                   substream=j)
                      for j, st in enumerate(frames)]
        pp = len(frames[0])
        # The shared per-layer r keeps every frame's count aligned.
        assert all(len(st) == pp for st in frames)
        counts.append(f * pp)

        flat = np.ascontiguousarray(np.vstack([st.features for st in frames]))
        h2 = tc.layer_norm(flat, w[p + "norm2.gamma"], w[p + "norm2.beta"])
        hidden = tc.gelu(tc.matmul(h2, w[p + "mlp.fc1.weight"]) + w[p + "mlp.fc1.bias"])
        flat = flat + (tc.matmul(hidden, w[p + "mlp.fc2.weight"]) + w[p + "mlp.fc2.bias"])
        if not np.isfinite(flat).all():
            raise NonFiniteActivationError(i)
        x = flat.reshape(f, pp, d)
        frames = [st.with_features(np.ascontiguousarray(x[j]))
                  for j, st in enumerate(frames)]
    combined = _concat_frames(frames)
    return _readout(combined, w, cfg), combined, counts


def layer_probe(cfg: ModelConfig, weights: dict[str, np.ndarray],
                plan: ReductionPlan, probe_layer: int,
                video: np.ndarray) -> TokenState:
    """Evolve the token set through merging alone, reusing one layer's key
    projection at every step.

    At each of the plan's layers the probed layer's pre-attention norm and
    K projection are applied to the current features and the reduction
    runs on those keys; attention and MLP never execute.  This isolates
    how a single layer's key space drives the whole merge cascade.  With a
    one-layer plan and probe_layer=0 the resulting trace matches a normal
    forward pass exactly.
    """
    if not 0 <= probe_layer < cfg.layers:
        raise ValueError(f"probe_layer {probe_layer} out of range for {cfg.layers} layers")
    validate_weights(weights, cfg)
    w = weights
    p = f"blocks.{probe_layer}."

    def keys_of(feats: np.ndarray) -> np.ndarray:
        h = tc.layer_norm(feats, w[p + "norm1.gamma"], w[p + "norm1.beta"])
        qkv = tc.matmul(h, w[p + "attn.qkv.weight"]) + w[p + "attn.qkv.bias"]
        _, k, _ = _split_heads(qkv, cfg.heads)
        return np.ascontiguousarray(k.mean(axis=0))

    if cfg.attention_mode == JOINT:
        state = patch_embed(video, w, cfg)
        for i in range(plan.layers):
            state = reduce_layer(state, keys_of(state.features), plan, i)
        return state
    frames = _frame_states(patch_embed(video, w, cfg), cfg)
    for i in range(plan.layers):
        frames = [reduce_layer(st, keys_of(st.features), plan, i, substream=j)
                  for j, st in enumerate(frames)]
    return _concat_frames(frames)

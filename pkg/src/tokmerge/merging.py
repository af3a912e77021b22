"""Training-free token reduction for transformer layers.

The main path is bipartite soft matching: unprotected tokens alternate
into sets A and B, every A token is matched to its most similar B token
by key cosine similarity, and the r highest-similarity edges are merged
by size-weighted mean.  Drop, random and hybrid baselines reuse the same
machinery so they stay directly comparable.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, replace

import numpy as np

log = logging.getLogger(__name__)

STRATEGIES = ("merge", "drop", "random_drop", "random_merge", "hybrid")
SCHEDULE_KINDS = ("constant", "decreasing", "increasing")

_EMPTY = np.empty(0, dtype=np.intp)


@dataclass
class TokenState:
    """A live token sequence: features, per-token patch counts, provenance.

    ``sizes[i]`` counts how many original tokens token i represents, and
    ``trace[i]`` holds their original slot indices (slot 0 is the class
    token when one exists).  ``sum(sizes)`` is invariant under merging and
    only shrinks when tokens are dropped.  ``protected`` indexes tokens
    that no reduction may touch.
    """

    features: np.ndarray           # (S, D) float32
    sizes: np.ndarray              # (S,) int64, all >= 1
    trace: list[frozenset[int]]
    protected: frozenset[int] = frozenset()

    @classmethod
    def fresh(cls, features: np.ndarray, protected=()) -> "TokenState":
        """Wrap freshly embedded tokens: unit sizes, one slot per trace."""
        feats = np.ascontiguousarray(features, dtype=np.float32)
        if feats.ndim != 2:
            raise ValueError(f"features must be (S, D), got {feats.shape}")
        s = feats.shape[0]
        return cls(
            features=feats,
            sizes=np.ones(s, dtype=np.int64),
            trace=[frozenset((i,)) for i in range(s)],
            protected=frozenset(int(p) for p in protected),
        )

    def __len__(self) -> int:
        return self.features.shape[0]

    def unprotected_indices(self) -> np.ndarray:
        mask = np.ones(len(self), dtype=bool)
        if self.protected:
            mask[list(self.protected)] = False
        return np.flatnonzero(mask)

    def with_features(self, features: np.ndarray) -> "TokenState":
        if features.shape[0] != len(self):
            raise ValueError("feature row count must match token count")
        return replace(self, features=features)

    def check_invariants(self) -> None:
        """Assert structural invariants; used by the test suite."""
        s = len(self)
        assert self.features.dtype == np.float32
        assert self.sizes.shape == (s,) and len(self.trace) == s
        assert (self.sizes >= 1).all()
        assert all(len(t) == n for t, n in zip(self.trace, self.sizes))
        seen: set[int] = set()
        for t in self.trace:
            assert not (t & seen), "trace sets must be disjoint"
            seen |= t
        assert all(0 <= p < s for p in self.protected)


@dataclass(frozen=True)
class ReductionPlan:
    """Per-layer reduction counts plus the strategy that spends them."""

    r_per_layer: tuple[int, ...]
    strategy: str = "merge"
    hybrid_threshold: float | None = None
    rng_seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "r_per_layer",
                           tuple(int(r) for r in self.r_per_layer))
        if any(r < 0 for r in self.r_per_layer):
            raise ValueError("r_per_layer entries must be >= 0")
        if self.strategy == "hybrid" and self.hybrid_threshold is None:
            raise ValueError("hybrid strategy requires hybrid_threshold")
        if self.strategy in ("random_drop", "random_merge") and self.rng_seed is None:
            raise ValueError(f"strategy {self.strategy!r} requires rng_seed")

    @property
    def layers(self) -> int:
        return len(self.r_per_layer)


@dataclass
class BipartiteMatch:
    """One-to-many A-to-B matching plus the ranked edge subset kept.

    ``best_dst[i]`` indexes ``partition_b`` for the best partner of A slot
    i; ``selected`` lists A slots of the kept edges in rank order.
    Several A tokens may share one B destination.
    """

    partition_a: np.ndarray    # (|A|,) token indices, ascending
    partition_b: np.ndarray    # (|B|,) token indices, ascending
    best_dst: np.ndarray       # (|A|,) indices into partition_b
    best_score: np.ndarray     # (|A|,) cosine similarity, float64
    selected: np.ndarray       # (r,) positions into partition_a

    def selected_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Token-index pairs (absorbed A token, destination B token)."""
        a = self.partition_a[self.selected]
        b = self.partition_b[self.best_dst[self.selected]]
        return a, b


def partition_alternating(state: TokenState) -> tuple[np.ndarray, np.ndarray]:
    """Split unprotected tokens into A (even) and B (odd) by their position
    along the unprotected subsequence.

    Fewer than two unprotected tokens yield two empty partitions, meaning
    no reduction is possible this layer.
    """
    live = state.unprotected_indices()
    if live.size < 2:
        return _EMPTY, _EMPTY
    return live[0::2], live[1::2]


def _unit_rows(keys: np.ndarray) -> np.ndarray:
    """Rows scaled to unit norm in float64; zero rows stay zero."""
    k = keys.astype(np.float64)
    norms = np.linalg.norm(k, axis=-1, keepdims=True)
    np.divide(k, norms, out=k, where=norms > 0)
    return k


def bipartite_soft_match(keys: np.ndarray, partition_a: np.ndarray,
                         partition_b: np.ndarray, r: int) -> BipartiteMatch:
    """Match every A token to its most similar B token and keep the top r.

    Similarity is cosine over ``keys`` rows (zero vectors score 0 against
    everything).  Ties break toward the lower A index, then the lower B
    index.  r is clamped to the number of available edges.
    """
    a_idx = np.asarray(partition_a, dtype=np.intp)
    b_idx = np.asarray(partition_b, dtype=np.intp)
    if a_idx.size == 0 or b_idx.size == 0:
        return BipartiteMatch(a_idx, b_idx, _EMPTY.copy(),
                              np.empty(0, dtype=np.float64), _EMPTY.copy())
    unit = _unit_rows(keys)
    scores = unit[a_idx] @ unit[b_idx].T          # (|A|, |B|) float64
    np.clip(scores, -1.0, 1.0, out=scores)
    best_dst = scores.argmax(axis=1)              # first max: lowest B index
    best_score = scores[np.arange(a_idx.size), best_dst]
    # Stable sort keeps equal-score edges in ascending A order.
    order = np.argsort(-best_score, kind="stable")
    r = max(0, min(int(r), a_idx.size, b_idx.size))
    return BipartiteMatch(a_idx, b_idx, best_dst, best_score, order[:r])


def _rebuild(state: TokenState, merge_a: np.ndarray, merge_b: np.ndarray,
             dropped: np.ndarray) -> TokenState:
    """Absorb each merge_a[i] into merge_b[i] by size-weighted mean, delete
    the absorbed and dropped rows, and keep survivors in original order.

    Size weighting happens in float64 on size-scaled rows, so rows whose
    size does not change round-trip bit-exactly.
    """
    s = len(state)
    sizes = state.sizes
    new_sizes = sizes.copy()
    if merge_a.size:
        weighted = state.features.astype(np.float64) * sizes[:, None]
        np.add.at(weighted, merge_b, weighted[merge_a])
        np.add.at(new_sizes, merge_b, sizes[merge_a])
        merged64 = weighted / new_sizes[:, None]

    keep = np.ones(s, dtype=bool)
    keep[merge_a] = False
    keep[dropped] = False

    if merge_a.size:
        new_features = np.ascontiguousarray(merged64[keep].astype(np.float32))
    else:
        new_features = np.ascontiguousarray(state.features[keep])

    absorbed: dict[int, list[int]] = defaultdict(list)
    for a, b in zip(merge_a.tolist(), merge_b.tolist()):
        absorbed[b].append(a)
    new_trace = []
    for i in np.flatnonzero(keep).tolist():
        t = state.trace[i]
        if i in absorbed:
            t = t.union(*(state.trace[a] for a in absorbed[i]))
        new_trace.append(t)

    remap = np.cumsum(keep) - 1
    new_protected = frozenset()
    if state.protected:
        assert all(keep[p] for p in state.protected), "protected token removed"
        new_protected = frozenset(int(remap[p]) for p in state.protected)

    return TokenState(new_features, new_sizes[keep], new_trace, new_protected)


def merge_selected(state: TokenState, match: BipartiteMatch) -> TokenState:
    """Apply the selected merges: each kept A token is absorbed into its
    best B partner; the result is bit-equal to the input when nothing is
    selected."""
    a, b = match.selected_pairs()
    if a.size == 0:
        return state
    return _rebuild(state, a, b, _EMPTY)


def drop_selected(state: TokenState, match: BipartiteMatch) -> TokenState:
    """Delete the A endpoints of the selected edges outright."""
    a, _ = match.selected_pairs()
    if a.size == 0:
        return state
    return _rebuild(state, _EMPTY, _EMPTY, a)


def layer_rng(seed: int, layer: int, substream: int = 0) -> np.random.Generator:
    """Deterministic per-layer PCG64 stream so random baselines replay."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(layer), int(substream)))
    return np.random.Generator(np.random.PCG64(ss))


def reduce_layer(state: TokenState, keys: np.ndarray, plan: ReductionPlan,
                 layer: int, substream: int = 0) -> TokenState:
    """Apply one layer's reduction to ``state`` using attention ``keys``.

    The effective count is min(plan.r_per_layer[layer], floor(|unprotected| / 2));
    a clamp is logged.  ``substream`` decorrelates random draws when one
    layer reduces several independent sequences, as in divided attention.
    """
    r_req = int(plan.r_per_layer[layer])
    a_idx, b_idx = partition_alternating(state)
    limit = b_idx.size                      # == floor(unprotected / 2)
    r = min(r_req, limit)
    if r_req > limit:
        log.warning("layer %d: r=%d clamped to %d (unprotected=%d)",
                    layer, r_req, limit, len(state) - len(state.protected))
    if r <= 0:
        return state

    strategy = plan.strategy
    if strategy == "merge":
        return merge_selected(state, bipartite_soft_match(keys, a_idx, b_idx, r))
    if strategy == "drop":
        return drop_selected(state, bipartite_soft_match(keys, a_idx, b_idx, r))
    if strategy == "random_drop":
        rng = layer_rng(plan.rng_seed, layer, substream)
        victims = rng.choice(state.unprotected_indices(), size=r, replace=False)
        return _rebuild(state, _EMPTY, _EMPTY, victims.astype(np.intp))
    if strategy == "random_merge":
        rng = layer_rng(plan.rng_seed, layer, substream)
        a = rng.choice(a_idx, size=r, replace=False).astype(np.intp)
        b = rng.choice(b_idx, size=r, replace=False).astype(np.intp)
        return _rebuild(state, a, b, _EMPTY)
    if strategy == "hybrid":
        match = bipartite_soft_match(keys, a_idx, b_idx, r)
        a, b = match.selected_pairs()
        sims = match.best_score[match.selected]
        mergeable = sims >= plan.hybrid_threshold
        return _rebuild(state, a[mergeable], b[mergeable], a[~mergeable])
    raise ValueError(f"unknown reduction strategy: {strategy!r}")


def _round_half_away(x: float) -> int:
    if x >= 0:
        return math.floor(x + 0.5)
    return math.ceil(x - 0.5)


def build_schedule(kind: str, r: int, length: int) -> list[int]:
    """Per-layer reduction counts: constant r, or a linear ramp between 2r
    and 0 (decreasing) / 0 and 2r (increasing), rounded half away from
    zero.  All kinds degenerate to [r] for a single layer."""
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind: {kind!r}")
    if r < 0:
        raise ValueError("schedule r must be >= 0")
    if length < 1:
        raise ValueError("schedule length must be >= 1")
    if kind == "constant" or length == 1:
        return [int(r)] * length
    if kind == "decreasing":
        return [_round_half_away(2.0 * r * (length - 1 - i) / (length - 1))
                for i in range(length)]
    return [_round_half_away(2.0 * r * i / (length - 1)) for i in range(length)]


def token_count_trajectory(s0: int, plan: ReductionPlan,
                           num_protected: int = 0) -> list[int]:
    """Token counts before the first layer and after each layer, with the
    same per-layer clamp reduce_layer applies."""
    if s0 < 1:
        raise ValueError("s0 must be >= 1")
    s = int(s0)
    counts = [s]
    for r in plan.r_per_layer:
        s -= min(int(r), (s - num_protected) // 2)
        counts.append(s)
    return counts

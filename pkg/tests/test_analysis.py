"""Analysis-harness tests: FLOP accounting against hand counts, benchmark
plumbing, palette properties, cluster rendering, and result files."""

import csv
import dataclasses
import hashlib

import numpy as np
import pytest

import tokmerge as tm
from tokmerge import analysis
from tokmerge.merging import TokenState, token_count_trajectory


def _plan(rs, **kw):
    return tm.ReductionPlan(r_per_layer=tuple(rs), **kw)


def _joint_cfg(**over):
    kw = dict(attention_mode=tm.JOINT, layers=1, embed_dim=2, heads=1,
              frames=1, tubelet_t=1, patch=8, image_size=16,
              has_class_token=False, proportional_attention=True,
              num_classes=2)
    kw.update(over)
    return tm.ModelConfig(**kw)


REFERENCE_CFG = tm.ModelConfig(
    attention_mode=tm.JOINT, layers=12, embed_dim=768, heads=12, frames=32,
    tubelet_t=2, patch=16, image_size=224, has_class_token=True,
    proportional_attention=True, num_classes=400)


class TestConfigHash:
    def test_stable_and_sensitive(self, tiny_cfg):
        plan = _plan([3, 3])
        h = analysis.config_hash(tiny_cfg, plan)
        assert h == analysis.config_hash(tiny_cfg, plan)
        assert len(h) == 16 and int(h, 16) >= 0
        assert h != analysis.config_hash(tiny_cfg, _plan([3, 4]))
        other = dataclasses.replace(tiny_cfg, num_classes=6)
        assert h != analysis.config_hash(other, plan)
        assert analysis.config_hash(tiny_cfg, None) != analysis.config_hash(
            tiny_cfg, _plan([0, 0]))


class TestCountFlops:
    def test_joint_hand_count(self):
        """4 tokens, width 2, hidden 8: attention is 8*4*4 + 4*16*2 = 256
        and the MLP is 4*4*2*8 = 256."""
        cfg = _joint_cfg()
        rep = analysis.count_flops(cfg, None)
        assert rep.per_layer == [(256, 256, 0)]
        assert rep.total == 512
        assert rep.baseline_total == 512
        assert rep.predicted_speedup == 1.0

    def test_joint_hand_count_with_merge(self):
        """r=1 on 4 tokens: matching costs 2*2*2*2 = 16, attention is
        unchanged, and the MLP shrinks to 3 tokens."""
        cfg = _joint_cfg()
        rep = analysis.count_flops(cfg, _plan([1]))
        assert rep.per_layer == [(256, 192, 16)]
        assert rep.total == 256 + 192 + 16
        assert rep.baseline_total == 512

    def test_divided_hand_count(self):
        cfg = tm.ModelConfig(
            attention_mode=tm.DIVIDED, layers=1, embed_dim=2, heads=1,
            frames=2, tubelet_t=1, patch=8, image_size=16,
            has_class_token=False, proportional_attention=True, num_classes=2)
        rep = analysis.count_flops(cfg, None)
        # projections 16*2*4*4, temporal 4*4*4*2, spatial 4*2*16*2
        assert rep.per_layer == [(512 + 128 + 256, 512, 0)]
        rep = analysis.count_flops(cfg, _plan([1]))
        assert rep.per_layer == [(896, 384, 32)]

    def test_zero_plan_matches_no_plan(self, tiny_cfg):
        a = analysis.count_flops(tiny_cfg, None)
        b = analysis.count_flops(tiny_cfg, _plan([0, 0]))
        assert a.total == b.total
        assert b.predicted_speedup == 1.0

    def test_layer_mismatch_raises(self, tiny_cfg):
        with pytest.raises(ValueError, match="plan covers"):
            analysis.count_flops(tiny_cfg, _plan([1]))

    def test_speedup_grows_with_r_at_reference_scale(self):
        totals = [analysis.count_flops(REFERENCE_CFG, _plan([r] * 12)).total
                  for r in (0, 50, 100, 150, 200, 250, 300)]
        assert all(a > b for a, b in zip(totals, totals[1:]))

    def test_reference_scale_frozen_predictions(self):
        """Predicted speedups for the three r=300 schedules at the
        3137-token scale, frozen from the cost model."""
        from tokmerge.merging import build_schedule
        for kind, expect in (("constant", 2.5524), ("decreasing", 4.2573),
                             ("increasing", 1.6465)):
            plan = _plan(build_schedule(kind, 300, 12))
            got = analysis.count_flops(REFERENCE_CFG, plan).predicted_speedup
            assert got == pytest.approx(expect, abs=5e-4)

    def test_attention_charged_before_mlp_after(self):
        """The S^2 attention term uses the pre-merge count while the MLP
        uses the post-merge count."""
        cfg = _joint_cfg(layers=2)
        rep = analysis.count_flops(cfg, _plan([1, 0]))
        attn_l1 = rep.per_layer[1].attention
        # Layer 1 sees 3 tokens: 8*3*4 + 4*9*2 = 168.
        assert attn_l1 == 168
        assert rep.per_layer[0].mlp == rep.per_layer[1].mlp == 4 * 3 * 2 * 8


class TestSyntheticVideo:
    def test_shape_range_and_determinism(self, tiny_cfg):
        v1 = analysis.synthetic_video(tiny_cfg, 5)
        v2 = analysis.synthetic_video(tiny_cfg, 5)
        assert v1.shape == (2, 80, 80, 3) and v1.dtype == np.float32
        assert (v1 >= 0).all() and (v1 < 1).all()
        assert v1.tobytes() == v2.tobytes()
        assert v1.tobytes() != analysis.synthetic_video(tiny_cfg, 6).tobytes()


class TestRunBenchmark:
    def test_rejects_bad_parameters(self, tiny_cfg, tiny_weights):
        with pytest.raises(ValueError, match="iters"):
            analysis.run_benchmark(tiny_cfg, tiny_weights, None, iters=2)
        with pytest.raises(ValueError, match="warmup"):
            analysis.run_benchmark(tiny_cfg, tiny_weights, None, warmup=-1)

    def test_reports_consistent_throughput(self, tiny_cfg, tiny_weights,
                                           tiny_video):
        plan = _plan([6, 6])
        res = analysis.run_benchmark(tiny_cfg, tiny_weights, plan, iters=3,
                                     warmup=0, video=tiny_video)
        assert res.wall_seconds > 0
        assert res.clips_per_second == pytest.approx(1.0 / res.wall_seconds)
        assert res.frames_per_second == pytest.approx(2.0 / res.wall_seconds)
        assert res.measured_speedup == 1.0
        assert res.config_hash == analysis.config_hash(tiny_cfg, plan)
        assert res.per_layer_counts == token_count_trajectory(
            51, plan, num_protected=1)

    def test_speedup_uses_given_baseline(self, tiny_cfg, tiny_weights,
                                         tiny_video):
        res = analysis.run_benchmark(tiny_cfg, tiny_weights, None, iters=3,
                                     warmup=0, baseline_wall=1.0,
                                     video=tiny_video)
        assert res.measured_speedup == pytest.approx(1.0 / res.wall_seconds)


class TestClusterColors:
    def test_distinct_even_and_deterministic(self):
        n = 600
        colors = analysis.cluster_colors(n)
        assert len(colors) == n
        assert len(set(colors)) == n
        assert colors == analysis.cluster_colors(n)
        flat = [c for rgb in colors for c in rgb]
        assert all(0 <= c <= 255 and c % 2 == 0 for c in flat)

    def test_distinct_after_alpha_blend_over_black(self):
        colors = analysis.cluster_colors(500)
        blended = {tuple(int(np.rint(0.5 * c)) for c in rgb) for rgb in colors}
        assert len(blended) == 500

    def test_empty_palette(self):
        assert analysis.cluster_colors(0) == []


def _fresh_state(n, dim=4):
    return TokenState.fresh(np.zeros((n, dim), dtype=np.float32))


class TestRenderClusters:
    def _cfg(self, **over):
        kw = dict(attention_mode=tm.JOINT, layers=1, embed_dim=16, heads=4,
                  frames=2, tubelet_t=1, patch=16, image_size=48,
                  has_class_token=False, proportional_attention=True,
                  num_classes=2)
        kw.update(over)
        return tm.ModelConfig(**kw)

    def _patch_pixel(self, frames, cfg, slot):
        t, r, c = analysis.patch_slot_cell(cfg, slot)
        patch = frames[t * cfg.tubelet_t][r * cfg.patch:(r + 1) * cfg.patch,
                                          c * cfg.patch:(c + 1) * cfg.patch]
        first = patch[0, 0]
        assert (patch == first).all(), "patch region must be uniform"
        return tuple(int(v) for v in first)

    def test_unmerged_tokens_color_their_own_patch(self, tmp_path):
        cfg = self._cfg()   # 2 frames x 9 patches
        video = np.zeros((2, 48, 48, 3), dtype=np.float32)
        state = _fresh_state(18)
        paths = analysis.render_clusters(state, video, cfg, tmp_path / "viz")
        assert [p.name for p in paths] == ["frame_0000.ppm", "frame_0001.ppm"]
        frames = [tm.read_ppm(p) for p in paths]
        colors = analysis.cluster_colors(18)
        seen = set()
        for slot in range(18):
            got = self._patch_pixel(frames, cfg, slot)
            expect = tuple(c // 2 for c in colors[slot])
            assert got == expect
            seen.add(got)
        assert len(seen) == 18

    def test_merged_patches_share_one_color(self, tmp_path):
        cfg = self._cfg(frames=1)
        video = np.zeros((1, 48, 48, 3), dtype=np.float32)
        feats = np.zeros((8, 4), dtype=np.float32)
        trace = [frozenset({0, 3})] + [frozenset({i}) for i in (1, 2, 4, 5, 6, 7)]
        sizes = np.array([2, 1, 1, 1, 1, 1, 1], dtype=np.int64)
        state = TokenState(features=feats[:7], sizes=sizes, trace=trace,
                           protected=frozenset())
        frames = [tm.read_ppm(p) for p in
                  analysis.render_clusters(state, video, cfg, tmp_path / "viz")]
        assert self._patch_pixel(frames, cfg, 0) == self._patch_pixel(frames, cfg, 3)
        assert self._patch_pixel(frames, cfg, 1) != self._patch_pixel(frames, cfg, 2)

    def test_dropped_patches_go_gray(self, tmp_path):
        cfg = self._cfg(frames=1)
        video = np.zeros((1, 48, 48, 3), dtype=np.float32)
        trace = [frozenset({i}) for i in range(9) if i != 5]
        state = TokenState(features=np.zeros((8, 4), np.float32),
                           sizes=np.ones(8, np.int64), trace=trace,
                           protected=frozenset())
        frames = [tm.read_ppm(p) for p in
                  analysis.render_clusters(state, video, cfg, tmp_path / "viz")]
        assert self._patch_pixel(frames, cfg, 5) == (64, 64, 64)

    def test_class_token_shifts_patch_slots(self, tmp_path):
        cfg = self._cfg(frames=1, has_class_token=True)
        video = np.zeros((1, 48, 48, 3), dtype=np.float32)
        state = _fresh_state(10)
        frames = [tm.read_ppm(p) for p in
                  analysis.render_clusters(state, video, cfg, tmp_path / "viz")]
        colors = analysis.cluster_colors(10)
        # Patch j belongs to token j+1; the class token paints nothing.
        for j in range(9):
            assert self._patch_pixel(frames, cfg, j) == tuple(
                c // 2 for c in colors[j + 1])

    def test_alpha_blend_over_mid_gray_source(self, tmp_path):
        cfg = self._cfg(frames=1)
        video = np.full((1, 48, 48, 3), 0.5, dtype=np.float32)
        state = _fresh_state(9)
        frames = [tm.read_ppm(p) for p in
                  analysis.render_clusters(state, video, cfg, tmp_path / "viz")]
        colors = analysis.cluster_colors(9)
        for slot in (0, 4, 8):
            # base 128 -> every channel lands on 64 + color/2 exactly.
            expect = tuple(64 + c // 2 for c in colors[slot])
            assert self._patch_pixel(frames, cfg, slot) == expect

    def test_tubelet_tint_spans_both_frames(self, tmp_path):
        cfg = tm.ModelConfig(
            attention_mode=tm.JOINT, layers=1, embed_dim=24, heads=4,
            frames=2, tubelet_t=2, patch=16, image_size=48,
            has_class_token=False, proportional_attention=True, num_classes=2)
        video = np.zeros((2, 48, 48, 3), dtype=np.float32)
        state = _fresh_state(9)
        frames = [tm.read_ppm(p) for p in
                  analysis.render_clusters(state, video, cfg, tmp_path / "viz")]
        np.testing.assert_array_equal(frames[0], frames[1])

    def test_render_is_deterministic(self, tmp_path):
        cfg = self._cfg()
        video = analysis.synthetic_video(cfg, 8)
        state = _fresh_state(18)
        a = analysis.render_clusters(state, video, cfg, tmp_path / "a")
        b = analysis.render_clusters(state, video, cfg, tmp_path / "b")
        for pa, pb in zip(a, b):
            assert pa.read_bytes() == pb.read_bytes()

    def test_rejects_mismatched_video(self, tmp_path):
        cfg = self._cfg()
        with pytest.raises(ValueError, match="video dims"):
            analysis.render_clusters(_fresh_state(18),
                                     np.zeros((1, 48, 48, 3), np.float32),
                                     cfg, tmp_path / "viz")

    def test_rejects_trace_outside_grid(self, tmp_path):
        cfg = self._cfg(frames=1)
        state = _fresh_state(10)   # slot 9 is outside the 9-patch grid
        with pytest.raises(ValueError, match="outside"):
            analysis.render_clusters(state, np.zeros((1, 48, 48, 3), np.float32),
                                     cfg, tmp_path / "viz")

    def test_end_to_end_digest_is_frozen(self, tmp_path):
        """Byte-level regression pin for the full forward+render path."""
        cfg = self._cfg(layers=2, frames=2)
        weights = tm.init_synthetic_weights(cfg, 7)
        video = analysis.synthetic_video(cfg, 3)
        _, state, _ = tm.forward(video, weights, cfg, plan=_plan([4, 4]))
        paths = analysis.render_clusters(state, video, cfg, tmp_path / "viz")
        digest = hashlib.sha256(b"".join(p.read_bytes() for p in paths)).hexdigest()
        assert digest == ("5bd5de737139194ab21828bf4fb344df"
                          "9d5cd7df11eaf2817c1cd0e3d247d90c")


class TestResultsFiles:
    def _sample(self, tiny_cfg, tiny_weights, tiny_video):
        plan = _plan([6, 6])
        bench = analysis.run_benchmark(tiny_cfg, tiny_weights, plan, iters=3,
                                       warmup=0, baseline_wall=2.0,
                                       video=tiny_video)
        flops = analysis.count_flops(tiny_cfg, plan)
        return analysis.format_results(tiny_cfg, plan, bench, flops), bench

    def test_results_round_trip(self, tmp_path, tiny_cfg, tiny_weights,
                                tiny_video):
        results, bench = self._sample(tiny_cfg, tiny_weights, tiny_video)
        for key in ("config_hash", "fps", "wall_seconds", "speedup",
                    "predicted_speedup", "flops", "baseline_flops",
                    "token_counts"):
            assert key in results
        path = tmp_path / "run.txt"
        analysis.write_results(path, results)
        back = analysis.read_results(path)
        assert back == results
        assert float(back["speedup"]) == pytest.approx(bench.measured_speedup,
                                                       abs=1e-6)
        counts = [int(c) for c in back["token_counts"].split(",")]
        assert counts == bench.per_layer_counts
        first = path.read_text().splitlines()[0]
        assert first == f"config_hash={bench.config_hash}"

    def test_sweep_csv_layout(self, tmp_path):
        path = tmp_path / "sweep.csv"
        analysis.write_sweep_csv(path, [(0.0, 1.0, 1.0), (0.25, 1.5, 1.4)])
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["r_fraction", "predicted_speedup", "measured_speedup"]
        assert rows[1] == ["0.000000", "1.000000", "1.000000"]
        assert rows[2] == ["0.250000", "1.500000", "1.400000"]

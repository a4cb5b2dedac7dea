"""Synthetic scenes and the metric suite."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aharness.geometry import Box, Grid, chi_fill, iou
from aharness.scenario import (
    Scene,
    band_of,
    build_benchmark,
    evaluate,
    generate_scene,
)

GRID = Grid(100, 100)


def masks_with_iou(target_iou):
    """Two 100x100-grid box fills with a chosen IoU: width-w overlap strips."""
    # fill [0,0,10,10] vs [0,0,10,k]: IoU = min/max of heights
    k = round(10 * target_iou)
    return chi_fill(Box(0, 0, 10, 10), GRID), chi_fill(Box(0, 0, 10, k), GRID)


class TestEvaluate:
    def test_giou_p50(self):
        a1, b1 = masks_with_iou(0.6)
        a2, b2 = masks_with_iou(0.4)
        rep = evaluate([b1, b2], [a1, a2])
        assert rep.giou == pytest.approx(0.5, abs=1e-9)
        assert rep.p50 == pytest.approx(0.5, abs=1e-9)

    def test_p50_95(self):
        a1, b1 = masks_with_iou(0.6)
        a2, b2 = masks_with_iou(0.4)
        rep = evaluate([b1, b2], [a1, a2])
        # 0.6 clears thresholds 0.50/0.55/0.60; 0.4 clears none
        assert rep.p50_95 == pytest.approx(0.15, abs=1e-9)

    def test_perfect(self):
        m = chi_fill(Box(5, 5, 50, 50), GRID)
        rep = evaluate([m, m], [m, m])
        assert (rep.giou, rep.ciou, rep.p50, rep.p50_95) == (1.0, 1.0, 1.0, 1.0)

    def test_ciou_single_sample_equals_giou(self):
        a, b = masks_with_iou(0.7)
        rep = evaluate([b], [a])
        assert rep.ciou == pytest.approx(rep.giou, abs=1e-9)

    def test_length_mismatch(self):
        m = chi_fill(Box(0, 0, 10, 10), GRID)
        with pytest.raises(ValueError):
            evaluate([m], [m, m])


class TestGenerateScene:
    def test_deterministic(self):
        a = generate_scene(seed=9, difficulty=0.5, occlusion=0.3)
        b = generate_scene(seed=9, difficulty=0.5, occlusion=0.3)
        assert a.to_json() == b.to_json()

    def test_easy_target_large(self):
        scene = generate_scene(seed=9, difficulty=0.0, occlusion=0.0)
        assert scene.target_gt.area >= 0.10 * scene.grid.size

    def test_hard_target_small(self):
        scene = generate_scene(seed=9, difficulty=1.0, occlusion=0.0)
        assert scene.target_gt.area < 0.05 * scene.grid.size

    def test_occlusion_zero_full_visibility(self):
        scene = generate_scene(seed=9, difficulty=0.5, occlusion=0.0)
        assert iou(scene.observed_target, scene.target_gt) == 1.0

    def test_occlusion_hides_part(self):
        scene = generate_scene(seed=9, difficulty=0.5, occlusion=0.6)
        assert scene.observed_target.area < scene.target_gt.area

    def test_nonempty_invariants(self):
        scene = generate_scene(seed=123, difficulty=0.8, occlusion=0.2)
        assert not scene.target_gt.is_empty
        assert scene.object_descriptor

    def test_json_roundtrip(self):
        scene = generate_scene(seed=77, difficulty=0.4, occlusion=0.1)
        assert Scene.from_json(scene.to_json()).to_json() == scene.to_json()


class TestBands:
    def test_boundaries(self):
        assert band_of(0.0) == "easy"
        assert band_of(0.32) == "easy"
        assert band_of(0.33) == "medium"
        assert band_of(0.66) == "hard"
        assert band_of(1.0) == "hard"


class TestBuildBenchmark:
    def test_counts_and_disjoint_seeds(self):
        bench = build_benchmark({"easy": 10, "hard": 10}, seed=7)
        assert len(bench.eval_scenes) == 20
        assert len(bench.library) == 20
        eval_seeds = {s.seed for s in bench.eval_scenes}
        lib_masks = len(bench.library)
        assert len(eval_seeds) == 20 and lib_masks == 20

    def test_reproducible(self):
        a = build_benchmark({"easy": 3, "hard": 3}, seed=7)
        b = build_benchmark({"easy": 3, "hard": 3}, seed=7)
        assert [s.to_json() for s in a.eval_scenes] == [s.to_json() for s in b.eval_scenes]

    def test_library_easy_sequence(self):
        bench = build_benchmark({"easy": 5}, seed=7)
        _, _, _, actions = bench.library[0]
        assert [a.skill for a in actions] == ["detect", "segment"]

    def test_save_load(self, tmp_path):
        bench = build_benchmark({"easy": 2, "medium": 2}, seed=4)
        path = str(tmp_path / "bench.json")
        bench.save(path)
        from aharness.scenario import Benchmark
        again = Benchmark.load(path)
        assert [s.to_json() for s in again.eval_scenes] == \
               [s.to_json() for s in bench.eval_scenes]


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=10))
@settings(max_examples=60, deadline=None)
def test_p50_95_never_exceeds_p50(ious):
    pairs = [masks_with_iou(v) for v in ious]
    rep = evaluate([b for _, b in pairs], [a for a, _ in pairs])
    assert rep.p50_95 <= rep.p50 + 1e-12


@given(st.integers(0, 100_000), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
@settings(max_examples=60, deadline=None)
def test_scene_generation_total(seed, difficulty, occlusion):
    scene = generate_scene(seed=seed, difficulty=difficulty, occlusion=occlusion)
    assert not scene.target_gt.is_empty
    assert 0 <= len(scene.distractors) <= 3

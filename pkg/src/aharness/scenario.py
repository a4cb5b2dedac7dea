"""Synthetic affordance worlds and the evaluation metric suite.

Scenes are small grids with one actionable target region (rectangle or
ellipse) whose footprint shrinks with difficulty, optional occlusion applied
to the observed copy only, and up to three distractor regions. Category
anchors are fixed so same-category scenes land in similar places across
seeds; that gives retrieval and reference transfer real signal.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, Grid, KeyPoint, Mask, fit_scale, iou
from .skills import SkillAction, SkillParams

GRID_SIDE = 128
AREA_FRAC_EASY = 0.12
AREA_FRAC_HARD = 0.006

# name, normalized center, shape, aspect ratio
CATEGORIES = [
    ("kettle-switch", (0.22, 0.30), "rect", 1.4),
    ("drawer-handle", (0.70, 0.25), "rect", 3.0),
    ("door-knob", (0.85, 0.50), "ellipse", 1.0),
    ("faucet-lever", (0.35, 0.15), "rect", 2.2),
    ("lamp-button", (0.15, 0.70), "ellipse", 1.0),
    ("mug-handle", (0.55, 0.60), "ellipse", 0.6),
    ("valve-wheel", (0.80, 0.78), "ellipse", 1.0),
    ("toaster-lever", (0.40, 0.80), "rect", 0.5),
    ("window-latch", (0.62, 0.12), "rect", 1.8),
    ("microwave-pad", (0.90, 0.30), "rect", 0.7),
    ("stove-dial", (0.28, 0.52), "ellipse", 1.0),
    ("cabinet-pull", (0.08, 0.40), "rect", 0.4),
    ("kettle-lid", (0.50, 0.35), "ellipse", 1.6),
    ("switch-plate", (0.12, 0.12), "rect", 0.8),
    ("bottle-cap", (0.68, 0.88), "ellipse", 1.0),
    ("pan-handle", (0.30, 0.90), "rect", 3.5),
    ("remote-key", (0.88, 0.65), "rect", 0.9),
    ("jar-lid", (0.45, 0.08), "ellipse", 1.2),
    ("lever-arm", (0.05, 0.85), "rect", 2.8),
    ("push-bar", (0.75, 0.45), "rect", 4.0),
    ("fridge-grip", (0.18, 0.55), "rect", 0.45),
    ("oven-latch", (0.58, 0.42), "rect", 2.5),
    ("blender-dial", (0.33, 0.68), "ellipse", 1.0),
    ("kettle-spout", (0.47, 0.22), "ellipse", 0.7),
    ("tap-knob", (0.72, 0.08), "ellipse", 1.1),
    ("chair-lever", (0.10, 0.28), "rect", 3.2),
    ("bin-pedal", (0.25, 0.95), "rect", 1.6),
    ("shutter-pull", (0.93, 0.15), "rect", 0.35),
    ("grinder-crank", (0.52, 0.88), "ellipse", 1.4),
    ("thermostat-ring", (0.83, 0.92), "ellipse", 1.0),
    ("radiator-valve", (0.05, 0.58), "ellipse", 0.9),
    ("keyboard-key", (0.64, 0.72), "rect", 1.0),
    ("printer-tray", (0.38, 0.42), "rect", 2.0),
    ("socket-switch", (0.92, 0.48), "rect", 0.8),
    ("hose-nozzle", (0.15, 0.90), "ellipse", 0.6),
    ("ladder-rung", (0.48, 0.65), "rect", 4.5),
    ("gate-bolt", (0.78, 0.32), "rect", 2.7),
    ("clock-crown", (0.60, 0.05), "ellipse", 1.0),
    ("speaker-knob", (0.08, 0.08), "ellipse", 1.2),
    ("fan-cord", (0.30, 0.05), "rect", 0.3),
    ("desk-clamp", (0.95, 0.78), "rect", 1.3),
    ("tube-cap", (0.42, 0.95), "ellipse", 1.0),
    ("mixer-paddle", (0.20, 0.18), "rect", 0.55),
    ("sewing-wheel", (0.88, 0.05), "ellipse", 1.0),
    ("piano-lid", (0.55, 0.50), "rect", 3.8),
    ("camera-shutter", (0.68, 0.58), "ellipse", 1.0),
    ("vice-handle", (0.12, 0.45), "rect", 2.4),
    ("safe-dial", (0.35, 0.30), "ellipse", 1.0),
    ("stapler-arm", (0.82, 0.18), "rect", 1.9),
    ("tripod-lock", (0.25, 0.40), "rect", 0.65),
    ("scooter-bell", (0.45, 0.78), "ellipse", 0.8),
    ("dryer-door", (0.70, 0.95), "ellipse", 1.3),
    ("napkin-ring", (0.02, 0.70), "ellipse", 1.0),
    ("pipe-union", (0.58, 0.28), "ellipse", 0.75),
    ("monitor-stand", (0.90, 0.85), "rect", 1.5),
    ("hatch-wheel", (0.38, 0.55), "ellipse", 1.0),
    ("crate-lid", (0.65, 0.85), "rect", 2.1),
    ("pump-plunger", (0.15, 0.02), "rect", 0.5),
]

BANDS = {"easy": (0.0, 0.33), "medium": (0.33, 0.66), "hard": (0.66, 1.0)}


def band_of(difficulty: float) -> str:
    if difficulty < 0.33:
        return "easy"
    if difficulty < 0.66:
        return "medium"
    return "hard"


@dataclass
class Scene:
    grid: Grid
    target_gt: Mask
    observed_target: Mask
    object_descriptor: tuple
    difficulty: float
    occlusion: float
    distractors: list
    interaction_point: KeyPoint
    category: str
    instruction: str
    seed: int

    def to_json(self) -> dict:
        return {
            "grid": [self.grid.width, self.grid.height],
            "target_gt": [list(r) for r in self.target_gt.runs],
            "observed_target": [list(r) for r in self.observed_target.runs],
            "object_descriptor": list(self.object_descriptor),
            "difficulty": self.difficulty, "occlusion": self.occlusion,
            "distractors": [[list(r) for r in d.runs] for d in self.distractors],
            "interaction_point": [self.interaction_point.x,
                                  self.interaction_point.y],
            "category": self.category, "instruction": self.instruction,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        grid = Grid(*d["grid"])
        runs = lambda rr: tuple(tuple(r) for r in rr)
        return cls(grid=grid, target_gt=Mask(grid, runs(d["target_gt"])),
                   observed_target=Mask(grid, runs(d["observed_target"])),
                   object_descriptor=tuple(d["object_descriptor"]),
                   difficulty=d["difficulty"], occlusion=d["occlusion"],
                   distractors=[Mask(grid, runs(r)) for r in d["distractors"]],
                   interaction_point=KeyPoint(*d["interaction_point"]),
                   category=d["category"], instruction=d["instruction"],
                   seed=d["seed"])


def _shape_mask(grid: Grid, cx: float, cy: float, w: float, h: float,
                shape: str) -> Mask:
    arr = np.zeros((grid.height, grid.width), dtype=bool)
    x0 = max(0, int(round(cx - w / 2)))
    x1 = min(grid.width, max(x0 + 1, int(round(cx + w / 2))))
    y0 = max(0, int(round(cy - h / 2)))
    y1 = min(grid.height, max(y0 + 1, int(round(cy + h / 2))))
    if shape == "rect":
        arr[y0:y1, x0:x1] = True
    else:
        ys, xs = np.mgrid[0:grid.height, 0:grid.width]
        rx = max(0.5, (x1 - x0) / 2)
        ry = max(0.5, (y1 - y0) / 2)
        arr = ((xs + 0.5 - cx) / rx) ** 2 + ((ys + 0.5 - cy) / ry) ** 2 <= 1.0
    if not arr.any():
        arr[min(grid.height - 1, int(cy)), min(grid.width - 1, int(cx))] = True
    return Mask.from_array(arr, grid)


def _size_bucket(area_frac: float) -> int:
    return max(0, min(9, int(-math.log10(max(area_frac, 1e-4)) * 4)))


def generate_scene(seed: int, difficulty: float, occlusion: float) -> Scene:
    if not (0.0 <= difficulty <= 1.0 and 0.0 <= occlusion <= 1.0):
        raise ValueError("difficulty and occlusion must be in [0, 1]")
    rng = random.Random(f"scene|{seed}")
    grid = Grid(GRID_SIDE, GRID_SIDE)
    cat_i = rng.randrange(len(CATEGORIES))
    name, (ax, ay), shape, aspect = CATEGORIES[cat_i]
    area_frac = AREA_FRAC_EASY * (1 - difficulty) + AREA_FRAC_HARD * difficulty
    area = area_frac * grid.width * grid.height
    w = math.sqrt(area * aspect)
    h = area / w
    jitter = lambda: 1.0 + (rng.random() - 0.5) * 0.10
    cx = min(grid.width - 2.0, max(2.0, ax * grid.width * jitter()))
    cy = min(grid.height - 2.0, max(2.0, ay * grid.height * jitter()))
    target = _shape_mask(grid, cx, cy, w * jitter(), h * jitter(), shape)

    observed = target
    if occlusion > 0:
        arr = target.to_array().copy()
        quota = int(occlusion * target.area)
        removed = 0
        for col in range(grid.width):
            if removed >= quota:
                break
            col_pixels = arr[:, col].sum()
            if col_pixels == 0:
                continue
            take = min(col_pixels, quota - removed)
            idx = np.nonzero(arr[:, col])[0][:take]
            arr[idx, col] = False
            removed += int(take)
        if arr.any():
            observed = Mask.from_array(arr, grid)

    distractors = []
    n_dist = min(3, int(round(difficulty * 3)))
    tgt_arr = target.to_array()
    for k in range(n_dist):
        dcat = CATEGORIES[(cat_i + 1 + rng.randrange(len(CATEGORIES) - 1))
                          % len(CATEGORIES)]
        dx, dy = dcat[1]
        dm = _shape_mask(grid, dx * grid.width * jitter(),
                         dy * grid.height * jitter(),
                         w * jitter(), h * jitter(), dcat[2])
        darr = dm.to_array() & ~tgt_arr
        if darr.any():
            distractors.append(Mask.from_array(darr, grid))

    centroid = target.centroid()
    descriptor = (f"cat:{name}", f"obj:{name}", f"shape:{shape}",
                  f"aspect:{round(aspect, 1)}",
                  f"size:{_size_bucket(area_frac)}")
    return Scene(grid=grid, target_gt=target, observed_target=observed,
                 object_descriptor=descriptor, difficulty=difficulty,
                 occlusion=occlusion, distractors=distractors,
                 interaction_point=centroid, category=name,
                 instruction=f"actuate the {name}", seed=seed)


@dataclass
class MetricsReport:
    giou: float
    ciou: float
    p50: float
    p50_95: float
    n_samples: int
    mean_skill_calls: float
    retry_histogram: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"giou": self.giou, "ciou": self.ciou, "p50": self.p50,
                "p50_95": self.p50_95, "n_samples": self.n_samples,
                "mean_skill_calls": self.mean_skill_calls,
                "retry_histogram": {str(k): [v[0], v[1]]
                                    for k, v in sorted(self.retry_histogram.items())}}


def evaluate(predictions: list, ground_truths: list, traces=None) -> MetricsReport:
    if len(predictions) != len(ground_truths):
        raise ValueError("prediction/ground-truth length mismatch")
    ious = []
    inter_total = 0
    union_total = 0
    for p, g in zip(predictions, ground_truths):
        if p.grid.width != g.grid.width or p.grid.height != g.grid.height:
            raise ValueError("grid mismatch between prediction and ground truth")
        pa, ga = p.to_array(), g.to_array()
        inter = int((pa & ga).sum())
        union = int((pa | ga).sum())
        inter_total += inter
        union_total += union
        ious.append(inter / union if union else 1.0)
    n = len(ious)
    thresholds = [0.50 + 0.05 * i for i in range(10)]
    p50_95 = (sum(sum(1 for x in ious if x >= t) / n for t in thresholds) / 10
              if n else 0.0)
    calls = [getattr(t, "in_loop_calls", 0) for t in traces] if traces else []
    hist: dict = {}
    if traces:
        for t, x in zip(traces, ious):
            k = getattr(t, "detect_calls", 0)
            cnt, total = hist.get(k, (0, 0.0))
            hist[k] = (cnt + 1, total + x)
        hist = {k: (cnt, total / cnt) for k, (cnt, total) in hist.items()}
    return MetricsReport(
        giou=sum(ious) / n if n else 0.0,
        ciou=inter_total / union_total if union_total else 1.0,
        p50=sum(1 for x in ious if x >= 0.5) / n if n else 0.0,
        p50_95=p50_95, n_samples=n,
        mean_skill_calls=sum(calls) / len(calls) if calls else 0.0,
        retry_histogram=hist)


@dataclass
class Benchmark:
    eval_scenes: list
    library: list          # (descriptor, instruction, gt mask, solved actions)
    library_scenes: list
    seed: int

    def save(self, path: str):
        with open(path, "w") as f:
            json.dump({
                "seed": self.seed,
                "eval_scenes": [s.to_json() for s in self.eval_scenes],
                "library_scenes": [s.to_json() for s in self.library_scenes],
            }, f)

    @classmethod
    def load(cls, path: str) -> "Benchmark":
        with open(path) as f:
            d = json.load(f)
        lib_scenes = [Scene.from_json(s) for s in d["library_scenes"]]
        return cls(eval_scenes=[Scene.from_json(s) for s in d["eval_scenes"]],
                   library=[solve_scene(s) for s in lib_scenes],
                   library_scenes=lib_scenes, seed=d["seed"])


def solve_scene(scene: Scene):
    """Zero-noise solution: detect the target, then segment it tightly."""
    bb = scene.target_gt.bbox()
    roi = bb.padded(0.10, scene.grid)
    actions = (
        SkillAction("detect", SkillParams(roi=scene.grid.full_box(), scale=1,
                                          query=scene.instruction)),
        SkillAction("segment", SkillParams(roi=roi,
                                           scale=fit_scale(roi, scene.grid),
                                           query=scene.instruction,
                                           prompt_point=scene.interaction_point)),
    )
    return (scene.object_descriptor, scene.instruction, scene.target_gt, actions)


def build_benchmark(band_counts: dict, seed: int) -> Benchmark:
    """Disjoint eval and library splits with overlapping category coverage."""
    rng = random.Random(f"bench|{seed}")
    eval_scenes = []
    library_scenes = []
    idx = 0
    for band, count in band_counts.items():
        lo, hi = BANDS[band]
        for _ in range(count):
            d_eval = lo + (hi - lo) * rng.random()
            d_lib = lo + (hi - lo) * rng.random()
            eval_scenes.append(generate_scene(
                seed * 1000003 + idx, d_eval, occlusion=0.4 * d_eval))
            library_scenes.append(generate_scene(
                seed * 1000003 + 500000 + idx, d_lib, occlusion=0.0))
            idx += 1
    library = [solve_scene(s) for s in library_scenes]
    return Benchmark(eval_scenes=eval_scenes, library=library,
                     library_scenes=library_scenes, seed=seed)

"""Scene records and grid helpers, reconstructed from scene JSON files.

Masks are row-major run-length arrays over an explicit grid, matching the
host runtime's serialization. Only the fields the served skills consume
are modeled; everything else in the scene file is ignored.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np


def runs_to_array(runs, width: int, height: int) -> np.ndarray:
    flat = np.zeros(width * height, dtype=bool)
    for start, length in runs:
        flat[start:start + length] = True
    return flat.reshape(height, width)


def array_to_runs(arr: np.ndarray) -> list:
    flat = np.asarray(arr, dtype=bool).reshape(-1)
    padded = np.concatenate(([False], flat, [False]))
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    starts, ends = edges[::2], edges[1::2]
    return [[int(s), int(e - s)] for s, e in zip(starts, ends)]


def mask_bbox(arr: np.ndarray):
    """Tight [x_min, y_min, x_max, y_max) box, or None for an empty mask."""
    ys, xs = np.nonzero(arr)
    if len(xs) == 0:
        return None
    return [int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1]


def mask_centroid(arr: np.ndarray):
    ys, xs = np.nonzero(arr)
    if len(xs) == 0:
        return None
    return (float(xs.mean()) + 0.5, float(ys.mean()) + 0.5)


def mask_contains(arr: np.ndarray, x: float, y: float) -> bool:
    ix, iy = int(x), int(y)
    h, w = arr.shape
    if not (0 <= ix < w and 0 <= iy < h):
        return False
    return bool(arr[iy, ix])


def visible_fraction(arr: np.ndarray, roi) -> float:
    total = int(arr.sum())
    if total == 0:
        return 0.0
    x1, y1, x2, y2 = roi
    inside = int(arr[y1:y2, x1:x2].sum())
    return inside / total


def box_center(box) -> tuple:
    return ((box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0)


def box_extent(box) -> float:
    """Geometric mean of the side lengths; the jitter scale unit."""
    area = (box[2] - box[0]) * (box[3] - box[1])
    return math.sqrt(max(area, 1))


def box_contains_point(box, x: float, y: float) -> bool:
    return box[0] <= x < box[2] and box[1] <= y < box[3]


def boxes_intersect(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def clip_box(x1, y1, x2, y2, width: int, height: int) -> list:
    """Clamp possibly inverted corners into the grid, keeping area >= 1."""
    x1 = min(max(x1, 0), width)
    y1 = min(max(y1, 0), height)
    x2 = min(max(x2, 0), width)
    y2 = min(max(y2, 0), height)
    if x2 <= x1:
        x2 = min(x1 + 1, width)
        x1 = max(x1 - (0 if x2 > x1 else 1), 0)
    if y2 <= y1:
        y2 = min(y1 + 1, height)
        y1 = max(y1 - (0 if y2 > y1 else 1), 0)
    return [int(x1), int(y1), int(x2), int(y2)]


@dataclass(frozen=True)
class SceneView:
    """The slice of a scene file the detector and segmenter consume."""

    width: int
    height: int
    difficulty: float
    observed_target: np.ndarray
    distractors: tuple

    @classmethod
    def from_json(cls, d: dict) -> "SceneView":
        w, h = int(d["grid"][0]), int(d["grid"][1])
        return cls(
            width=w, height=h, difficulty=float(d["difficulty"]),
            observed_target=runs_to_array(d["observed_target"], w, h),
            distractors=tuple(runs_to_array(r, w, h) for r in d["distractors"]))

    @classmethod
    def load(cls, path: str) -> "SceneView":
        with open(path) as f:
            return cls.from_json(json.load(f))

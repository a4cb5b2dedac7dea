"""Grid geometry shared by every other module: masks, boxes, keypoints,
IoU, box filling, and ROI/zoom projection back to the global frame.

Masks are binary and stored run-length encoded (row-major offsets) so they
round-trip bit-exactly through trace and scenario files. Boxes use half-open
pixel intervals: [x_min, x_max) x [y_min, y_max).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MAX_SIDE = 4096
ALLOWED_SCALES = (1, 2, 4, 8)


class FrameMismatchError(ValueError):
    """Two values live in incompatible coordinate frames."""


class GeometryError(ValueError):
    """A geometric value violates its invariants."""


@dataclass(frozen=True)
class Grid:
    width: int
    height: int

    def __post_init__(self):
        if not (1 <= self.width <= MAX_SIDE and 1 <= self.height <= MAX_SIDE):
            raise GeometryError(f"grid {self.width}x{self.height} out of range")

    @property
    def size(self) -> int:
        return self.width * self.height

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def contains_point(self, x: float, y: float) -> bool:
        return 0 <= x <= self.width and 0 <= y <= self.height

    def full_box(self) -> "Box":
        return Box(0, 0, self.width, self.height)


@dataclass(frozen=True)
class Box:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min < 0 or self.y_min < 0:
            raise GeometryError(f"negative box corner: {self}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise GeometryError(f"inverted box: {self}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    @property
    def extent(self) -> float:
        """Geometric mean of the side lengths; the jitter scale unit."""
        return math.sqrt(max(self.area, 1))

    def check_in(self, grid: Grid) -> None:
        if self.x_max > grid.width or self.y_max > grid.height:
            raise GeometryError(f"box {self} outside grid {grid.width}x{grid.height}")

    def contains_point(self, x: float, y: float) -> bool:
        return self.x_min <= x < self.x_max and self.y_min <= y < self.y_max

    def intersects(self, other: "Box") -> bool:
        return (self.x_min < other.x_max and other.x_min < self.x_max
                and self.y_min < other.y_max and other.y_min < self.y_max)

    def intersection(self, other: "Box") -> "Box | None":
        x1, y1 = max(self.x_min, other.x_min), max(self.y_min, other.y_min)
        x2, y2 = min(self.x_max, other.x_max), min(self.y_max, other.y_max)
        if x1 >= x2 or y1 >= y2:
            return None
        return Box(x1, y1, x2, y2)

    def padded(self, fraction: float, grid: Grid) -> "Box":
        px = max(1, round(self.width * fraction))
        py = max(1, round(self.height * fraction))
        return Box(max(0, self.x_min - px), max(0, self.y_min - py),
                   min(grid.width, self.x_max + px), min(grid.height, self.y_max + py))

    def clamped(self, grid: Grid) -> "Box":
        return Box(min(max(0, self.x_min), grid.width),
                   min(max(0, self.y_min), grid.height),
                   min(max(0, self.x_max), grid.width),
                   min(max(0, self.y_max), grid.height))

    def to_list(self) -> list[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @staticmethod
    def from_list(vals) -> "Box":
        return Box(int(vals[0]), int(vals[1]), int(vals[2]), int(vals[3]))

    @staticmethod
    def bounded(x_min: float, y_min: float, x_max: float, y_max: float,
                grid: Grid) -> "Box":
        """Construct from possibly out-of-range corners, clipped to the grid."""
        x1 = min(max(0, int(x_min)), grid.width)
        y1 = min(max(0, int(y_min)), grid.height)
        return Box(x1, y1,
                   min(max(x1, int(x_max)), grid.width),
                   min(max(y1, int(y_max)), grid.height))


@dataclass(frozen=True)
class KeyPoint:
    x: float
    y: float
    confidence: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise GeometryError(f"keypoint confidence {self.confidence} out of [0,1]")


@dataclass(frozen=True)
class RoiTransform:
    """A crop window plus a zoom factor: the view a skill operated in."""

    roi: Box
    scale: int

    def __post_init__(self):
        if self.scale not in ALLOWED_SCALES:
            raise GeometryError(f"scale {self.scale} not in {ALLOWED_SCALES}")

    def local_grid(self) -> Grid:
        return Grid(self.roi.width * self.scale, self.roi.height * self.scale)


@dataclass(frozen=True)
class Mask:
    """Binary mask as sorted, non-overlapping row-major runs."""

    grid: Grid
    runs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        prev_end = 0
        for start, length in self.runs:
            if length <= 0 or start < prev_end:
                raise GeometryError("runs must be sorted, positive, non-overlapping")
            prev_end = start + length
        if prev_end > self.grid.size:
            raise GeometryError("runs exceed grid bounds")

    @staticmethod
    def from_array(arr: np.ndarray, grid: Grid | None = None) -> "Mask":
        arr = np.asarray(arr, dtype=bool)
        h, w = arr.shape
        grid = grid or Grid(w, h)
        if (grid.height, grid.width) != (h, w):
            raise FrameMismatchError("array shape does not match grid")
        flat = arr.reshape(-1)
        # Run boundaries from the diff of the padded flat mask.
        padded = np.concatenate(([False], flat, [False]))
        edges = np.flatnonzero(padded[1:] != padded[:-1])
        starts, ends = edges[::2], edges[1::2]
        runs = tuple((int(s), int(e - s)) for s, e in zip(starts, ends))
        return Mask(grid, runs)

    @staticmethod
    def empty(grid: Grid) -> "Mask":
        return Mask(grid, ())

    def to_array(self) -> np.ndarray:
        flat = np.zeros(self.grid.size, dtype=bool)
        for start, length in self.runs:
            flat[start:start + length] = True
        return flat.reshape(self.grid.height, self.grid.width)

    @property
    def area(self) -> int:
        return sum(length for _, length in self.runs)

    @property
    def is_empty(self) -> bool:
        return not self.runs

    def bbox(self) -> Box | None:
        if self.is_empty:
            return None
        arr = self.to_array()
        ys, xs = np.nonzero(arr)
        return Box(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)

    def centroid(self) -> KeyPoint | None:
        if self.is_empty:
            return None
        arr = self.to_array()
        ys, xs = np.nonzero(arr)
        return KeyPoint(float(xs.mean()) + 0.5, float(ys.mean()) + 0.5)

    def contains_point(self, x: float, y: float) -> bool:
        ix, iy = int(x), int(y)
        if not (0 <= ix < self.grid.width and 0 <= iy < self.grid.height):
            return False
        offset = iy * self.grid.width + ix
        for start, length in self.runs:
            if start <= offset < start + length:
                return True
            if start > offset:
                return False
        return False


def iou(a: Mask, b: Mask) -> float:
    """Intersection over union of two masks on the same grid.

    Both-empty pairs agree on "nothing" and score 1.0.
    """
    if a.grid != b.grid:
        raise FrameMismatchError(f"grid mismatch: {a.grid} vs {b.grid}")
    if a.is_empty and b.is_empty:
        return 1.0
    fa, fb = a.to_array(), b.to_array()
    inter = int(np.logical_and(fa, fb).sum())
    union = int(np.logical_or(fa, fb).sum())
    return inter / union


def chi_fill(b: Box, grid: Grid) -> Mask:
    """Convert a box to its filled mask on the given grid."""
    b.check_in(grid)
    if b.area == 0:
        return Mask.empty(grid)
    arr = np.zeros((grid.height, grid.width), dtype=bool)
    arr[b.y_min:b.y_max, b.x_min:b.x_max] = True
    return Mask.from_array(arr, grid)


def project_to_global(local: Mask, t: RoiTransform, grid: Grid) -> Mask:
    """Project a view-local mask back to the global frame.

    Downscaling by 1/scale uses nearest-pixel mapping (any set local pixel
    marks its global pixel: last-writer-wins degenerates to logical-or for
    binary masks); the result always lies inside the ROI.
    """
    expected = t.local_grid()
    if local.grid != expected:
        raise FrameMismatchError(
            f"local grid {local.grid} does not match view grid {expected}")
    t.roi.check_in(grid)
    out = np.zeros((grid.height, grid.width), dtype=bool)
    if not local.is_empty:
        arr = local.to_array()
        if t.scale == 1:
            out[t.roi.y_min:t.roi.y_max, t.roi.x_min:t.roi.x_max] = arr
        else:
            h, w = arr.shape
            down = arr.reshape(h // t.scale, t.scale, w // t.scale, t.scale).any(axis=(1, 3))
            out[t.roi.y_min:t.roi.y_max, t.roi.x_min:t.roi.x_max] = down
    return Mask.from_array(out, grid)


def point_distance_norm(p: KeyPoint, q: KeyPoint, grid: Grid) -> float:
    """Euclidean distance between two points divided by the grid diagonal."""
    d = math.hypot(p.x - q.x, p.y - q.y) / grid.diagonal
    return min(1.0, max(0.0, d))


def fit_scale(roi: Box, grid: Grid, cap: int = 8) -> int:
    """Largest allowed zoom whose view buffer still fits the grid frame."""
    if roi.width == 0 or roi.height == 0:
        return 1
    limit = min(grid.width // roi.width, grid.height // roi.height, cap)
    best = 1
    for s in ALLOWED_SCALES:
        if s <= limit:
            best = s
    return best

"""Skill abstraction, cost estimation, registry, and the deterministic
simulated skill suite (detector, segmenter, zoom, web search, dreamer).

All randomness flows through a counter-based generator keyed by
(seed, skill, step), so fixed seeds yield bit-identical outputs and traces
replay exactly. The external reference server reimplements the same
arithmetic; keep the draw order stable.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field

import numpy as np

from .evidence import EvidenceType, TextCue
from .geometry import (ALLOWED_SCALES, Box, GeometryError, Grid, KeyPoint,
                       Mask, RoiTransform)

SKILL_IDS = {"detect": 1, "segment": 2, "zoom": 3, "web_search": 4, "dreamer": 5}

# Fixed noise-shape constants; acceptance thresholds are calibrated to these.
BOX_JITTER_COEF = 0.15          # sigma = difficulty * coef * target extent
MASK_SHIFT_COEF = 0.6
DREAM_JITTER_COEF = 0.25
DET_MISS_BASE = 0.12            # first-pass miss floor, relieved by zoom
DIST_CONF_BASE, DIST_CONF_SPAN = 0.50, 0.25
VISIBILITY_FLOOR = 0.5          # fraction of target that must lie in the ROI


class RoutingError(KeyError):
    """Unknown skill id."""


class ParameterError(ValueError):
    """Parameters invalid for the requested skill."""


@dataclass(frozen=True)
class SkillParams:
    roi: Box
    scale: int = 1
    query: str = ""
    prompt_point: KeyPoint | None = None
    extras: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        if self.scale not in ALLOWED_SCALES:
            raise ParameterError(f"scale {self.scale} not in {ALLOWED_SCALES}")

    def extra(self, key: str, default: float = 0.0) -> float:
        for k, v in self.extras:
            if k == key:
                return v
        return default

    def key(self) -> str:
        """Canonical identity used for duplicate-call exclusion."""
        pp = None if self.prompt_point is None else [round(self.prompt_point.x, 3),
                                                     round(self.prompt_point.y, 3)]
        return json.dumps({"roi": self.roi.to_list(), "scale": self.scale,
                           "query": self.query, "prompt_point": pp}, sort_keys=True)


@dataclass(frozen=True)
class SkillAction:
    skill: str
    params: SkillParams

    def key(self) -> str:
        return f"{self.skill}|{self.params.key()}"


@dataclass
class SkillOutput:
    producer: str
    items: list[tuple[EvidenceType, object, float]] = field(default_factory=list)
    cost: float = 1.0


@dataclass(frozen=True)
class NoiseModel:
    seed: int = 0
    difficulty: float = 1.0     # global multiplier on per-scene difficulty
    p_det: float = 0.8
    p_seg: float = 0.9
    p_web: float = 0.8
    p_dream: float = 0.85
    zoom_relief: float = 0.6    # effective-difficulty factor per 2x zoom level


def rng_for(seed: int, skill: str, step: int) -> random.Random:
    """Counter-based stream: one independent generator per (seed, skill, step)."""
    digest = hashlib.sha256(f"{seed}|{skill}|{step}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def effective_difficulty(scene_difficulty: float, noise: NoiseModel, scale: int) -> float:
    """Zoom reduces effective difficulty inside the magnified view."""
    d = scene_difficulty * noise.difficulty
    d *= noise.zoom_relief ** round(math.log2(scale))
    return max(0.0, min(1.0, d))


def _clamp01(x: float) -> float:
    return max(0.0, min(1.0, x))


def _clip_box(x1, y1, x2, y2, bounds: Box) -> Box:
    x1 = min(max(x1, bounds.x_min), bounds.x_max)
    y1 = min(max(y1, bounds.y_min), bounds.y_max)
    x2 = min(max(x2, bounds.x_min), bounds.x_max)
    y2 = min(max(y2, bounds.y_min), bounds.y_max)
    if x2 <= x1:
        x2 = min(x1 + 1, bounds.x_max)
        x1 = max(x1 - (0 if x2 > x1 else 1), bounds.x_min)
    if y2 <= y1:
        y2 = min(y1 + 1, bounds.y_max)
        y1 = max(y1 - (0 if y2 > y1 else 1), bounds.y_min)
    return Box(int(x1), int(y1), int(x2), int(y2))


def _visible_fraction(mask: Mask, roi: Box) -> float:
    if mask.is_empty:
        return 0.0
    arr = mask.to_array()
    inside = int(arr[roi.y_min:roi.y_max, roi.x_min:roi.x_max].sum())
    return inside / mask.area


def _local_view(global_mask: Mask, view: RoiTransform) -> np.ndarray:
    """Crop a global mask to the view window and upsample by the zoom factor."""
    arr = global_mask.to_array()
    crop = arr[view.roi.y_min:view.roi.y_max, view.roi.x_min:view.roi.x_max]
    if view.scale > 1:
        crop = np.repeat(np.repeat(crop, view.scale, axis=0), view.scale, axis=1)
    return crop


def _morph(arr: np.ndarray, dilate: bool) -> np.ndarray:
    """One 4-neighbourhood dilation/erosion pass without scipy."""
    shifted = [arr,
               np.roll(arr, 1, axis=0), np.roll(arr, -1, axis=0),
               np.roll(arr, 1, axis=1), np.roll(arr, -1, axis=1)]
    for i, ax, edge in ((1, 0, 0), (2, 0, -1), (3, 1, 0), (4, 1, -1)):
        # np.roll wraps around; kill the wrapped row/column.
        sl = [slice(None), slice(None)]
        sl[ax] = edge
        shifted[i] = shifted[i].copy()
        shifted[i][tuple(sl)] = False if dilate else True
    stack = np.stack(shifted)
    return stack.any(axis=0) if dilate else stack.all(axis=0)


def corrupt_mask(local: np.ndarray, d_eff: float, rng: random.Random) -> np.ndarray:
    """Shift plus erode/dilate a local-frame mask proportionally to difficulty.

    Draw order (stable for the wire-parity reimplementation):
    gauss dx, gauss dy, uniform morph-1, uniform morph-1-direction,
    uniform morph-2, uniform morph-2-direction.
    """
    area = int(local.sum())
    extent = math.sqrt(max(area, 1))
    sigma = MASK_SHIFT_COEF * d_eff * extent
    dx = round(rng.gauss(0.0, sigma))
    dy = round(rng.gauss(0.0, sigma))
    u1, u1d = rng.random(), rng.random()
    u2, u2d = rng.random(), rng.random()
    if area == 0:
        return local
    out = np.zeros_like(local)
    h, w = local.shape
    ys, xs = np.nonzero(local)
    ys2 = np.clip(ys + dy, 0, h - 1)
    xs2 = np.clip(xs + dx, 0, w - 1)
    out[ys2, xs2] = True
    if u1 < min(0.9, 0.9 * d_eff):
        out = _morph(out, dilate=u1d < 0.5)
    if u2 < 0.4 * d_eff:
        out = _morph(out, dilate=u2d < 0.5)
    return out


# -- simulated skills ----------------------------------------------------

def invoke(skill: str, scene, instruction: str, params: SkillParams,
           noise: NoiseModel) -> SkillOutput:
    """Run one simulated skill. Deterministic for fixed (scene, params, noise)."""
    if skill not in SKILL_IDS:
        raise RoutingError(f"unknown skill {skill!r}")
    params.roi.check_in(scene.grid)
    if params.roi.width * params.scale > scene.grid.width or \
       params.roi.height * params.scale > scene.grid.height:
        raise ParameterError(
            f"roi {params.roi.to_list()} too large for scale {params.scale}")
    step = int(params.extra("step", 1))
    rng = rng_for(noise.seed, skill, step)
    if skill == "detect":
        return _detect(scene, params, noise, rng)
    if skill == "segment":
        return _segment(scene, params, noise, rng)
    if skill == "zoom":
        return SkillOutput("zoom", [])  # view change is applied by the runtime
    if skill == "web_search":
        return _web_search(scene, instruction, params, noise, rng)
    return _dreamer(scene, params, noise, rng)


def _detect(scene, params: SkillParams, noise: NoiseModel, rng) -> SkillOutput:
    d_eff = effective_difficulty(scene.difficulty, noise, params.scale)
    u_drop = rng.random()
    jit = [rng.gauss(0.0, 1.0) for _ in range(4)]
    u_conf = rng.random()
    out = SkillOutput("detect")
    observed = scene.observed_target
    if _visible_fraction(observed, params.roi) < VISIBILITY_FLOOR:
        for d in scene.distractors:
            bb = d.bbox()
            if bb is not None and params.roi.contains_point(*bb.center):
                conf = _clamp01(0.3 + 0.2 * u_conf)
                out.items.append((EvidenceType.BOX, bb.clamped(scene.grid), conf))
                break
        return out
    relief = noise.zoom_relief ** round(math.log2(params.scale))
    if u_drop < DET_MISS_BASE * relief + (1.0 - noise.p_det) * d_eff:
        return out  # dropout: empty result, sentinel appended on ingestion
    bb = observed.bbox()
    sigma = BOX_JITTER_COEF * d_eff * bb.extent
    box = _clip_box(round(bb.x_min + jit[0] * sigma), round(bb.y_min + jit[1] * sigma),
                    round(bb.x_max + jit[2] * sigma), round(bb.y_max + jit[3] * sigma),
                    scene.grid.full_box())
    conf = _clamp01(1.0 - (0.5 + 0.1 * u_conf) * d_eff)
    out.items.append((EvidenceType.BOX, box, conf))
    return out


def _segment(scene, params: SkillParams, noise: NoiseModel, rng) -> SkillOutput:
    d_eff = effective_difficulty(scene.difficulty, noise, params.scale)
    u_fail = rng.random()
    u_conf = rng.random()
    # corruption draws happen inside corrupt_mask, after the two above
    out = SkillOutput("segment")
    view = RoiTransform(params.roi, params.scale)
    prompt = params.prompt_point or KeyPoint(*params.roi.center)
    observed = scene.observed_target

    def emit(global_mask: Mask, severity: float, conf: float):
        local = _local_view(global_mask, view)
        local = corrupt_mask(local, severity, rng)
        out.items.append((EvidenceType.MASK,
                          Mask.from_array(local, view.local_grid()), conf))

    on_target = (observed.contains_point(prompt.x, prompt.y)
                 and _visible_fraction(observed, params.roi) >= VISIBILITY_FLOOR)
    if on_target and u_fail >= (1.0 - noise.p_seg) * d_eff:
        emit(observed, d_eff, _clamp01(1.0 - (0.45 + 0.1 * u_conf) * d_eff))
        return out
    # off-target or unreliable: latch onto the distractor nearest the prompt
    best, best_d = None, None
    for dmask in scene.distractors:
        c = dmask.centroid()
        if c is None or not dmask.bbox().intersects(params.roi):
            continue
        dist = math.hypot(c.x - prompt.x, c.y - prompt.y)
        if best_d is None or dist < best_d:
            best, best_d = dmask, dist
    if best is not None:
        emit(best, 0.5 * d_eff, _clamp01(DIST_CONF_BASE + DIST_CONF_SPAN * u_conf))
    return out


def _web_search(scene, instruction: str, params: SkillParams, noise: NoiseModel,
                rng) -> SkillOutput:
    u = rng.random()
    agree = u < noise.p_web
    topic = params.query or instruction or scene.category
    cue = TextCue(f"web guidance: {topic}", agree)
    return SkillOutput("web_search", [(EvidenceType.TEXT_CUE, cue, noise.p_web)])


def _dreamer(scene, params: SkillParams, noise: NoiseModel, rng) -> SkillOutput:
    d_eff = effective_difficulty(scene.difficulty, noise, params.scale)
    u = rng.random()
    gx, gy = rng.gauss(0.0, 1.0), rng.gauss(0.0, 1.0)
    u2 = rng.random()
    out = SkillOutput("dreamer")
    target = scene.interaction_point
    if u < noise.p_dream:
        bb = scene.target_gt.bbox()
        sigma = DREAM_JITTER_COEF * d_eff * bb.extent
        kx = min(max(target.x + gx * sigma, 0.0), scene.grid.width - 1)
        ky = min(max(target.y + gy * sigma, 0.0), scene.grid.height - 1)
        conf = _clamp01(noise.p_dream * (1.0 - 0.3 * d_eff))
    else:
        kx, ky = u2 * (scene.grid.width - 1), u * scene.grid.height * 0.93
        ky = min(ky, scene.grid.height - 1)
        conf = 0.3
    kp = KeyPoint(kx, ky, conf)
    cue = TextCue(f"imagined interaction near ({kx:.0f},{ky:.0f})", u < noise.p_dream)
    out.items.append((EvidenceType.KEYPOINT, kp, conf))
    out.items.append((EvidenceType.IMAGINED, cue, conf))
    return out


# -- cost and registry ---------------------------------------------------

def estimate_cost(action: SkillAction, weights: dict[str, float] | None = None) -> float:
    if weights and action.skill in weights:
        return float(weights[action.skill])
    return 1.0


@dataclass
class SkillDescriptor:
    skill: str
    invoker: object           # callable(scene, instruction, params, noise) -> SkillOutput
    cost_hint: float = 1.0
    external: bool = False


class SkillRegistry:
    def __init__(self):
        self._skills: dict[str, SkillDescriptor] = {}

    def register(self, skill: str, invoker, cost_hint: float = 1.0,
                 external: bool = False) -> None:
        if skill in self._skills:
            raise ValueError(f"skill {skill!r} already registered")
        self._skills[skill] = SkillDescriptor(skill, invoker, cost_hint, external)

    def deregister(self, skill: str) -> None:
        self._skills.pop(skill, None)

    def __contains__(self, skill: str) -> bool:
        return skill in self._skills

    def skills(self) -> list[str]:
        return list(self._skills)

    def invoke(self, action: SkillAction, scene, instruction: str,
               noise: NoiseModel) -> SkillOutput:
        if action.skill not in self._skills:
            raise RoutingError(f"skill {action.skill!r} not registered")
        return self._skills[action.skill].invoker(scene, instruction, action.params, noise)


def default_registry() -> SkillRegistry:
    reg = SkillRegistry()
    for name in SKILL_IDS:
        reg.register(name, _make_invoker(name))
    return reg


def _make_invoker(name: str):
    def _invoker(scene, instruction, params, noise):
        return invoke(name, scene, instruction, params, noise)
    return _invoker

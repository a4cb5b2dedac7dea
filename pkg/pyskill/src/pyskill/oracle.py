"""Noisy detector and segmenter arithmetic, mirrored from the host runtime.

Bit-exact parity is the contract: same counter-based generator keyed by
(seed, skill, step), same draw order inside each skill, same clamping and
rounding. Any drift here fails the cross-process parity suite.
"""

from __future__ import annotations

import hashlib
import math
import random

import numpy as np

from .world import (SceneView, array_to_runs, box_center, box_contains_point,
                    box_extent, boxes_intersect, clip_box, mask_bbox,
                    mask_centroid, mask_contains, visible_fraction)

ALLOWED_SCALES = (1, 2, 4, 8)

BOX_JITTER_COEF = 0.15          # sigma = difficulty * coef * target extent
MASK_SHIFT_COEF = 0.6
DET_MISS_BASE = 0.12            # first-pass miss floor, relieved by zoom
DIST_CONF_BASE, DIST_CONF_SPAN = 0.50, 0.25
VISIBILITY_FLOOR = 0.5


class BadParams(ValueError):
    """Parameters invalid for the requested skill; becomes an error envelope."""


def rng_for(seed: int, skill: str, step: int) -> random.Random:
    digest = hashlib.sha256(f"{seed}|{skill}|{step}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _clamp01(x: float) -> float:
    return max(0.0, min(1.0, x))


def effective_difficulty(scene_difficulty: float, difficulty_mult: float,
                         zoom_relief: float, scale: int) -> float:
    d = scene_difficulty * difficulty_mult
    d *= zoom_relief ** round(math.log2(scale))
    return max(0.0, min(1.0, d))


def _morph(arr: np.ndarray, dilate: bool) -> np.ndarray:
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
    """Shift plus erode/dilate. Draw order: gauss dx, gauss dy, u1, u1d, u2, u2d."""
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


def _check_params(scene: SceneView, params: dict):
    roi = params["roi"]
    scale = int(params["scale"])
    if scale not in ALLOWED_SCALES:
        raise BadParams(f"scale {scale} not in {ALLOWED_SCALES}")
    x1, y1, x2, y2 = roi
    if not (0 <= x1 < x2 <= scene.width and 0 <= y1 < y2 <= scene.height):
        raise BadParams(f"roi {roi} outside grid {scene.width}x{scene.height}")
    if (x2 - x1) * scale > scene.width or (y2 - y1) * scale > scene.height:
        raise BadParams(f"roi {roi} too large for scale {scale}")
    return roi, scale


def detect(scene: SceneView, params: dict, noise: dict, seed: int,
           step: int) -> list:
    """Returns result items: [{type, payload, confidence}]."""
    roi, scale = _check_params(scene, params)
    d_eff = effective_difficulty(scene.difficulty, noise["difficulty"],
                                 noise["zoom_relief"], scale)
    rng = rng_for(seed, "detect", step)
    u_drop = rng.random()
    jit = [rng.gauss(0.0, 1.0) for _ in range(4)]
    u_conf = rng.random()
    items = []
    observed = scene.observed_target
    if visible_fraction(observed, roi) < VISIBILITY_FLOOR:
        for d in scene.distractors:
            bb = mask_bbox(d)
            if bb is not None and box_contains_point(roi, *box_center(bb)):
                conf = _clamp01(0.3 + 0.2 * u_conf)
                items.append({"type": "box", "payload": {"box": bb},
                              "confidence": conf})
                break
        return items
    relief = noise["zoom_relief"] ** round(math.log2(scale))
    if u_drop < DET_MISS_BASE * relief + (1.0 - noise["p_det"]) * d_eff:
        return items
    bb = mask_bbox(observed)
    sigma = BOX_JITTER_COEF * d_eff * box_extent(bb)
    box = clip_box(round(bb[0] + jit[0] * sigma), round(bb[1] + jit[1] * sigma),
                   round(bb[2] + jit[2] * sigma), round(bb[3] + jit[3] * sigma),
                   scene.width, scene.height)
    conf = _clamp01(1.0 - (0.5 + 0.1 * u_conf) * d_eff)
    items.append({"type": "box", "payload": {"box": box}, "confidence": conf})
    return items


def segment(scene: SceneView, params: dict, noise: dict, seed: int,
            step: int) -> list:
    roi, scale = _check_params(scene, params)
    d_eff = effective_difficulty(scene.difficulty, noise["difficulty"],
                                 noise["zoom_relief"], scale)
    rng = rng_for(seed, "segment", step)
    u_fail = rng.random()
    u_conf = rng.random()
    # corruption draws happen inside corrupt_mask, after the two above
    items = []
    x1, y1, x2, y2 = roi
    prompt = params.get("prompt_point") or list(box_center(roi))
    observed = scene.observed_target

    def emit(global_mask: np.ndarray, severity: float, conf: float):
        local = global_mask[y1:y2, x1:x2]
        if scale > 1:
            local = np.repeat(np.repeat(local, scale, axis=0), scale, axis=1)
        local = corrupt_mask(local, severity, rng)
        items.append({"type": "mask",
                      "payload": {"mask": {"grid": [(x2 - x1) * scale,
                                                    (y2 - y1) * scale],
                                           "runs": array_to_runs(local)}},
                      "confidence": conf})

    on_target = (mask_contains(observed, prompt[0], prompt[1])
                 and visible_fraction(observed, roi) >= VISIBILITY_FLOOR)
    if on_target and u_fail >= (1.0 - noise["p_seg"]) * d_eff:
        emit(observed, d_eff, _clamp01(1.0 - (0.45 + 0.1 * u_conf) * d_eff))
        return items
    # off-target or unreliable: latch onto the distractor nearest the prompt
    best, best_d = None, None
    for dmask in scene.distractors:
        c = mask_centroid(dmask)
        if c is None or not boxes_intersect(mask_bbox(dmask), roi):
            continue
        dist = math.hypot(c[0] - prompt[0], c[1] - prompt[1])
        if best_d is None or dist < best_d:
            best, best_d = dmask, dist
    if best is not None:
        emit(best, 0.5 * d_eff, _clamp01(DIST_CONF_BASE + DIST_CONF_SPAN * u_conf))
    return items


HANDLERS = {"detect": detect, "segment": segment}

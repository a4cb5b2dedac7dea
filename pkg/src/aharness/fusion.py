"""Final output policy: pick a keypoint, prompt the segmenter with it.

Stage one selects a keypoint from the accumulated evidence (best-weighted
mask centroid, else best box center, else an imagined interaction point),
snapping it into a remembered reference region when a close match exists.
Stage two prompts the segmenter at that point inside a tight zoomed window.
Deterministic fallbacks cover the no-keypoint and failed-segment paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evidence import EvidenceStore, EvidenceType
from .geometry import (Box, Grid, KeyPoint, Mask, RoiTransform, chi_fill,
                       fit_scale, iou, project_to_global)
from .memory import SIMILARITY_FLOOR
from .skills import SkillAction, SkillOutput, SkillParams
from .verifier import VerifierConfig, effective_weights, per_record_stability


@dataclass
class FusionResult:
    mask: Mask
    keypoint: KeyPoint | None
    source: str        # prompted-segmentation | scale-stable-selection |
                       # consistent-average | empty

    def to_json(self) -> dict:
        return {"mask_runs": [list(r) for r in self.mask.runs],
                "grid": [self.mask.grid.width, self.mask.grid.height],
                "keypoint": None if self.keypoint is None
                else [self.keypoint.x, self.keypoint.y],
                "source": self.source}


def _transfer_region(reference: Mask, grid: Grid) -> Mask:
    """Nearest-neighbour resample of a reference mask onto this grid."""
    if reference.grid.width == grid.width and reference.grid.height == grid.height:
        return reference
    src = reference.to_array()
    ys = (np.arange(grid.height) * reference.grid.height // grid.height)
    xs = (np.arange(grid.width) * reference.grid.width // grid.width)
    return Mask.from_array(src[np.ix_(ys, xs)], grid)


def _snap_to_reference(point: KeyPoint, priors, grid: Grid,
                       floor: float = SIMILARITY_FLOOR) -> KeyPoint:
    for hit in priors or []:
        ref = getattr(hit.entry, "reference_mask", None)
        if hit.similarity < floor or ref is None or ref.is_empty:
            continue
        region = _transfer_region(ref, grid)
        if region.is_empty or region.contains_point(point.x, point.y):
            return point
        arr = region.to_array()
        ys, xs = np.nonzero(arr)
        d2 = (xs + 0.5 - point.x) ** 2 + (ys + 0.5 - point.y) ** 2
        i = int(np.argmin(d2))
        return KeyPoint(xs[i] + 0.5, ys[i] + 0.5, point.confidence)
    return point


def select_keypoint(store: EvidenceStore, priors,
                    cfg: VerifierConfig) -> KeyPoint | None:
    """Most reliable localization cue in the store, reference-snapped."""
    masks = [r for r in store.mask_records() if not r.is_sentinel]
    point = None
    if masks:
        stab = per_record_stability(store)
        weights = effective_weights(store, store.best_hypothesis(), stab, cfg)
        best = max(masks, key=lambda r: (stab.get(r.record_id, 1.0),
                                         weights.get(r.record_id, 0.0),
                                         r.self_confidence, r.record_id))
        point = best.global_mask(store.grid).centroid()
    if point is None:
        boxes, _ = store.latest_boxes_and_masks(store.grid.full_box())
        live = [b for b in boxes if not b.is_sentinel]
        if live:
            best = max(live, key=lambda r: (r.self_confidence, r.record_id))
            point = KeyPoint(*best.payload.center)
    if point is None:
        kps = store.latest_keypoints(store.grid.full_box())
        if kps:
            best = max(kps, key=lambda r: (r.payload.confidence, r.record_id))
            point = best.payload
    if point is None:
        return None
    return _snap_to_reference(point, priors, store.grid)


def refinement_action(store: EvidenceStore, point: KeyPoint,
                      instruction: str) -> SkillAction:
    grid = store.grid
    hyp = store.best_hypothesis()
    if hyp is not None and not hyp.is_empty:
        bb = hyp.bbox()
        w, h = max(4, (bb.width + 1) // 2), max(4, (bb.height + 1) // 2)
    else:
        w, h = grid.width // 8, grid.height // 8
    roi = Box.bounded(point.x - w, point.y - h, point.x + w, point.y + h, grid)
    if roi.area == 0:
        roi = grid.full_box()
    return SkillAction("segment", SkillParams(
        roi=roi, scale=fit_scale(roi, grid), query=instruction,
        prompt_point=point))


def _consistent_majority(globals_: list[Mask], cfg: VerifierConfig) -> Mask | None:
    """Pixelwise majority over the largest pairwise-consistent mask set."""
    keep = [m for m in globals_ if not m.is_empty]
    group: list[Mask] = []
    for m in keep:
        if all(iou(m, g) >= cfg.corroboration_iou for g in group):
            group.append(m)
    if len(group) < 2:
        return None
    stack = np.stack([g.to_array() for g in group])
    majority = stack.sum(axis=0) * 2 >= len(group)
    return Mask.from_array(majority, group[0].grid)


def fuse(store: EvidenceStore, cfg: VerifierConfig, priors, instruction: str,
         refine_fn=None) -> FusionResult:
    """Assemble the final mask. refine_fn(action) -> SkillOutput, optional."""
    point = select_keypoint(store, priors, cfg)
    if point is not None and refine_fn is not None:
        action = refinement_action(store, point, instruction)
        out: SkillOutput = refine_fn(action)
        for kind, payload, conf in out.items:
            if kind != EvidenceType.MASK or payload.is_empty:
                continue
            t = RoiTransform(action.params.roi, action.params.scale)
            candidate = project_to_global(payload, t, store.grid)
            if not candidate.is_empty:
                return FusionResult(mask=candidate, keypoint=point,
                                    source="prompted-segmentation")
    # fallback (a): most scale-stable mask hypothesis
    masks = [r for r in store.mask_records() if not r.is_sentinel]
    if masks:
        stab = per_record_stability(store)
        best = max(masks, key=lambda r: (stab.get(r.record_id, 1.0),
                                         r.self_confidence, r.record_id))
        return FusionResult(mask=best.global_mask(store.grid), keypoint=point,
                            source="scale-stable-selection")
    # fallback (b): majority over consistent hypotheses (boxes as fills)
    boxes, _ = store.latest_boxes_and_masks(store.grid.full_box())
    live = [chi_fill(b.payload, store.grid) for b in boxes if not b.is_sentinel]
    maj = _consistent_majority(live, cfg)
    if maj is not None:
        return FusionResult(mask=maj, keypoint=point, source="consistent-average")
    if live:
        return FusionResult(mask=live[0], keypoint=point,
                            source="consistent-average")
    return FusionResult(mask=Mask.empty(store.grid), keypoint=point,
                        source="empty")

"""Relative diagnostics over the evidence store and the commit decision.

Three signals gate commitment: cross-skill consistency (box/mask agreement),
cross-scale stability (drift between zoom levels), and evidence sufficiency
(reliability-weighted support for the current hypothesis). On denial the
dominant deficiency maps to a corrective proposal for the router.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .evidence import (SPATIAL_TYPES, TEXTUAL_TYPES, EvidenceRecord,
                       EvidenceStore, EvidenceType, TextCue)
from .geometry import (ALLOWED_SCALES, Box, Grid, KeyPoint, Mask, chi_fill,
                       fit_scale, iou, point_distance_norm)
from .skills import SkillAction, SkillParams

# Maps producer skill to its evidence-source class for the base weight prior.
SOURCE_CLASS = {"detect": "det", "segment": "seg", "zoom": "det",
                "web_search": "web", "dreamer": "dream"}
# Which diagnostic dimension a skill's invocation chiefly improves.
SKILL_DIMENSION = {"segment": "omega", "detect": "zeta", "zoom": "zeta",
                   "dreamer": "mu", "web_search": "mu"}

DEFAULT_BASE_WEIGHTS = {"seg": 0.35, "det": 0.30, "dream": 0.20, "web": 0.15}


@dataclass
class VerifierConfig:
    alpha: float = 0.5
    beta: float = 0.3
    gamma: float = 0.2
    delta: float = 0.8
    omega_floor: float = 0.5
    tau_zeta: float = 0.7
    tau_mu: float = 0.6
    sigmoid_slope: float = 10.0
    sigmoid_center: float = 0.5
    base_weights: dict = field(default_factory=lambda: dict(DEFAULT_BASE_WEIGHTS))
    corroboration_iou: float = 0.5
    stability_floor: float = 0.7

    def __post_init__(self):
        total = self.alpha + self.beta + self.gamma
        if total <= 0:
            raise ValueError("alpha+beta+gamma must be positive")
        self.alpha, self.beta, self.gamma = (self.alpha / total, self.beta / total,
                                             self.gamma / total)
        wsum = sum(self.base_weights.values())
        if wsum <= 0:
            raise ValueError("base weights must sum to a positive value")
        self.base_weights = {k: v / wsum for k, v in self.base_weights.items()}
        if not 0.0 < self.delta <= 1.0:
            raise ValueError("delta must be in (0, 1]")
        if not 0.0 <= self.omega_floor <= 1.0:
            raise ValueError("omega floor must be in [0, 1]")


@dataclass
class DiagnosticReport:
    omega: float
    zeta: float
    mu: float
    mu_squashed: float
    v: float
    commit: bool
    deficiency: str            # one of {"omega", "zeta", "mu", "none"}
    proposal: SkillAction | None
    step: int

    def to_json(self) -> dict:
        prop = None
        if self.proposal is not None:
            pp = self.proposal.params.prompt_point
            prop = {"skill": self.proposal.skill,
                    "roi": self.proposal.params.roi.to_list(),
                    "scale": self.proposal.params.scale,
                    "query": self.proposal.params.query,
                    "prompt_point": None if pp is None else [pp.x, pp.y]}
        return {"omega": self.omega, "zeta": self.zeta, "mu": self.mu,
                "mu_squashed": self.mu_squashed, "v": self.v,
                "commit": self.commit, "deficiency": self.deficiency,
                "proposal": prop, "step": self.step}


def cross_skill_consistency(store: EvidenceStore, roi: Box) -> float:
    """Max agreement between the latest boxes and masks in the query ROI.

    Falls back to 1 - normalized point distance against mask centroids when
    keypoints are the only localizers available.
    """
    boxes, masks = store.latest_boxes_and_masks(roi)
    if not masks:
        return 0.0
    mask_globals = [m.global_mask(store.grid) for m in masks]
    if boxes:
        best = 0.0
        for b in boxes:
            filled = chi_fill(b.payload, store.grid)
            for gm in mask_globals:
                best = max(best, iou(filled, gm))
        return best
    points = store.latest_keypoints(roi)
    if not points:
        return 0.0
    best = 0.0
    for p in points:
        for gm in mask_globals:
            c = gm.centroid()
            if c is None:
                continue
            best = max(best, 1.0 - point_distance_norm(p.payload, c, store.grid))
    return best


def cross_scale_stability(store: EvidenceStore) -> float:
    """1 - mean drift over cross-scale prediction pairs; 1 when no pairs."""
    pairs = store.stability_pairs()
    if not pairs:
        return 1.0
    drift = sum(store.pair_distance(a, b) for a, b in pairs) / len(pairs)
    return max(0.0, min(1.0, 1.0 - drift))


def per_record_stability(store: EvidenceStore) -> dict[int, float]:
    """Mean cross-scale agreement per record; 1 for records in no pair."""
    sums: dict[int, list[float]] = {}
    for a, b in store.stability_pairs():
        d = store.pair_distance(a, b)
        sums.setdefault(a.record_id, []).append(1.0 - d)
        sums.setdefault(b.record_id, []).append(1.0 - d)
    out = {}
    for r in store.records:
        vals = sums.get(r.record_id)
        out[r.record_id] = sum(vals) / len(vals) if vals else 1.0
    return out


def _spatial_overlap(a: EvidenceRecord, b: EvidenceRecord, grid: Grid) -> float:
    """IoU between two spatial records; keypoints count 1.0 on containment."""
    if a.kind == EvidenceType.KEYPOINT or b.kind == EvidenceType.KEYPOINT:
        point, other = (a, b) if a.kind == EvidenceType.KEYPOINT else (b, a)
        if other.kind == EvidenceType.KEYPOINT:
            d = point_distance_norm(point.payload, other.payload, grid)
            return 1.0 if d <= 0.05 else 0.0
        gm = other.global_mask(grid)
        return 1.0 if gm.contains_point(point.payload.x, point.payload.y) else 0.0
    return iou(a.global_mask(grid), b.global_mask(grid))


def effective_weights(store: EvidenceStore, hypothesis: Mask | None,
                      zeta_per_record: dict[int, float],
                      cfg: VerifierConfig) -> dict[int, float]:
    """Reliability-modulated, renormalized weight per record.

    w = base(source class) * self-confidence * corroboration * stability,
    renormalized to sum to 1 over every record currently in the store.
    """
    records = store.records
    if not records:
        return {}
    spatial = [r for r in records if r.kind in SPATIAL_TYPES]
    raw: dict[int, float] = {}
    for r in records:
        base = cfg.base_weights.get(SOURCE_CLASS.get(r.producer, "web"), 0.0)
        rho = r.self_confidence
        if r.kind in SPATIAL_TYPES:
            corr = 0.0
            for other in spatial:
                if other.record_id == r.record_id:
                    continue
                if _spatial_overlap(r, other, store.grid) >= cfg.corroboration_iou:
                    corr = 1.0
                    break
        else:
            corr = 1.0 if isinstance(r.payload, TextCue) and r.payload.semantic_agreement else 0.0
        stab = 1.0 if zeta_per_record.get(r.record_id, 1.0) >= cfg.stability_floor else 0.0
        raw[r.record_id] = base * rho * corr * stab
    total = sum(raw.values())
    if total <= 0:
        return {rid: 0.0 for rid in raw}
    return {rid: w / total for rid, w in raw.items()}


def _supports(record: EvidenceRecord, hypothesis: Mask, store: EvidenceStore,
              cfg: VerifierConfig) -> bool:
    """The binary support indicator for one record against the hypothesis."""
    if record.kind in TEXTUAL_TYPES:
        return isinstance(record.payload, TextCue) and record.payload.semantic_agreement
    # overlap with the hypothesis region
    if record.kind == EvidenceType.KEYPOINT:
        overlaps = hypothesis.contains_point(record.payload.x, record.payload.y)
    else:
        overlaps = iou(record.global_mask(store.grid), hypothesis) > 0.0
    if not overlaps:
        return False
    # a high-confidence localizer must corroborate the hypothesis
    corroborated = False
    for other in store.records:
        if other.kind not in (EvidenceType.BOX, EvidenceType.MASK):
            continue
        if other.self_confidence < 0.5:
            continue
        if iou(other.global_mask(store.grid), hypothesis) >= cfg.corroboration_iou:
            corroborated = True
            break
    if not corroborated:
        return False
    # no unresolved conflict: a later same-type record in the same region
    # that disagrees below the corroboration threshold marks this one stale
    for other in store.records:
        if (other.kind == record.kind and other.step > record.step
                and other.roi.intersects(record.roi)
                and record.kind in (EvidenceType.BOX, EvidenceType.MASK)
                and iou(other.global_mask(store.grid),
                        record.global_mask(store.grid)) < cfg.corroboration_iou):
            return False
    return True


def evidence_sufficiency(store: EvidenceStore, hypothesis: Mask | None,
                         weights: dict[int, float], cfg: VerifierConfig) -> float:
    if hypothesis is None or not store.records:
        return 0.0
    mu = 0.0
    for r in store.records:
        if _supports(r, hypothesis, store, cfg):
            mu += weights.get(r.record_id, 0.0)
    return max(0.0, min(1.0, mu))


def squash(x: float, cfg: VerifierConfig) -> float:
    return 1.0 / (1.0 + math.exp(-cfg.sigmoid_slope * (x - cfg.sigmoid_center)))


def commit_score(omega: float, zeta: float, mu: float, cfg: VerifierConfig) -> float:
    return cfg.alpha * omega + cfg.beta * zeta + cfg.gamma * squash(mu, cfg)


def commit_decision(v: float, omega: float, cfg: VerifierConfig) -> bool:
    """Commit iff the aggregate clears delta AND consistency clears the floor.

    Budget exhaustion terminates the loop elsewhere; it never sets commit.
    """
    return v >= cfg.delta and omega >= cfg.omega_floor


def diagnose_and_propose(omega: float, zeta: float, mu_squashed: float,
                         cfg: VerifierConfig, store: EvidenceStore,
                         memory_hit: bool, active_roi: Box, active_scale: int,
                         instruction: str = "", dreamer_used: bool = False,
                         memory_roi: Box | None = None,
                         memory_scale_cap: int | None = None) -> tuple[str, SkillAction]:
    """Pick the dominant deficiency and map it to a corrective action.

    The sufficiency dimension only competes once a hypothesis exists; before
    any mask is available the actionable gap is consistency, not support.
    """
    has_hypothesis = store.best_hypothesis_record() is not None
    deficits = [
        ("omega", max(0.0, cfg.omega_floor - omega)),
        ("zeta", max(0.0, cfg.tau_zeta - zeta)),
        ("mu", max(0.0, cfg.tau_mu - mu_squashed) if has_hypothesis else 0.0),
    ]
    # priority order omega > zeta > mu breaks ties, including the all-zero case
    deficiency = max(deficits, key=lambda kv: kv[1])[0]
    if all(d == 0.0 for _, d in deficits):
        deficiency = "omega"
    proposal = _corrective_action(deficiency, store, memory_hit, active_roi,
                                  active_scale, instruction, dreamer_used,
                                  memory_roi, memory_scale_cap)
    return deficiency, proposal


def _best_box(store: EvidenceStore) -> Box | None:
    boxes, _ = store.latest_boxes_and_masks(store.grid.full_box())
    if not boxes:
        return None
    return max(boxes, key=lambda r: (r.self_confidence, r.record_id)).payload


def _refine_scale(roi: Box, grid: Grid, active_scale: int,
                  scale_cap: int | None = None) -> int:
    limit = min(fit_scale(roi, grid),
                max(active_scale * 2, scale_cap or 0), 8)
    best = 1
    for s in ALLOWED_SCALES:
        if s <= limit:
            best = s
    return best


def _corrective_action(deficiency: str, store: EvidenceStore, memory_hit: bool,
                       active_roi: Box, active_scale: int, instruction: str,
                       dreamer_used: bool, memory_roi: Box | None = None,
                       memory_scale_cap: int | None = None) -> SkillAction:
    grid = store.grid
    best_box = _best_box(store)
    hyp_rec = store.best_hypothesis_record()
    hyp_bbox = None
    if hyp_rec is not None:
        gm = hyp_rec.global_mask(grid)
        hyp_bbox = gm.bbox()
    if deficiency == "omega":
        # refine the ROI to where box and hypothesis agree, then re-segment
        roi = None
        if best_box is not None and hyp_bbox is not None:
            roi = best_box.intersection(hyp_bbox)
        if roi is None:
            roi = best_box or hyp_bbox or memory_roi or active_roi
        roi = roi.padded(0.10, grid).clamped(grid)
        scale = _refine_scale(roi, grid, active_scale, memory_scale_cap)
        return SkillAction("segment", SkillParams(
            roi=roi, scale=scale, query=instruction,
            prompt_point=KeyPoint(*roi.center)))
    if deficiency == "zeta":
        # 2x zoom into the disputed region, then re-detect
        disputed = _disputed_region(store) or best_box or active_roi
        cx, cy = disputed.center
        w = max(4, active_roi.width // 2)
        h = max(4, active_roi.height // 2)
        roi = Box.bounded(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, grid)
        if roi.area == 0:
            roi = active_roi
        scale = _refine_scale(roi, grid, active_scale)
        return SkillAction("detect", SkillParams(roi=roi, scale=scale, query=instruction))
    # mu: complementary knowledge, dreamer for familiar categories
    skill = "dreamer" if (memory_hit and not dreamer_used) else "web_search"
    return SkillAction(skill, SkillParams(roi=active_roi, scale=1, query=instruction))


def _disputed_region(store: EvidenceStore) -> Box | None:
    """Bounding region of the least-stable cross-scale pair."""
    pairs = store.stability_pairs()
    if not pairs:
        return None
    worst = max(pairs, key=lambda ab: store.pair_distance(*ab))
    boxes = []
    for rec in worst:
        if rec.kind == EvidenceType.MASK:
            bb = rec.global_mask(store.grid).bbox()
        else:
            bb = Box(int(rec.payload.x), int(rec.payload.y),
                     int(rec.payload.x) + 1, int(rec.payload.y) + 1)
        if bb is not None:
            boxes.append(bb)
    if not boxes:
        return None
    return Box(min(b.x_min for b in boxes), min(b.y_min for b in boxes),
               max(b.x_max for b in boxes), max(b.y_max for b in boxes))


def evaluate_step(store: EvidenceStore, cfg: VerifierConfig, step: int,
                  active_roi: Box, active_scale: int, memory_hit: bool,
                  instruction: str = "", dreamer_used: bool = False,
                  propose: bool = True, memory_roi: Box | None = None,
                  memory_scale_cap: int | None = None) -> DiagnosticReport:
    """Run the full diagnostic pass for one step."""
    omega = cross_skill_consistency(store, active_roi)
    zeta = cross_scale_stability(store)
    stab = per_record_stability(store)
    hypothesis = store.best_hypothesis()
    weights = effective_weights(store, hypothesis, stab, cfg)
    mu = evidence_sufficiency(store, hypothesis, weights, cfg)
    mu_sq = squash(mu, cfg)
    v = commit_score(omega, zeta, mu, cfg)
    commit = commit_decision(v, omega, cfg)
    deficiency, proposal = "none", None
    if not commit and propose:
        deficiency, proposal = diagnose_and_propose(
            omega, zeta, mu_sq, cfg, store, memory_hit, active_roi,
            active_scale, instruction, dreamer_used, memory_roi,
            memory_scale_cap)
    return DiagnosticReport(omega=omega, zeta=zeta, mu=mu, mu_squashed=mu_sq,
                            v=v, commit=commit, deficiency=deficiency,
                            proposal=proposal, step=step)

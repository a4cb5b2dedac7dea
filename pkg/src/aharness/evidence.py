"""Append-only provenance-tagged evidence store for one episode.

Each skill call is parsed into typed records carrying producer id, ROI,
zoom level, cost, and the tool's own confidence. The store never mutates
or deletes records; diagnostics are computed elsewhere from snapshots.
"""

from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass, field

from .geometry import (Box, FrameMismatchError, GeometryError, Grid, KeyPoint,
                       Mask, RoiTransform, point_distance_norm,
                       project_to_global)


class EvidenceType(str, enum.Enum):
    BOX = "box"
    MASK = "mask"
    KEYPOINT = "keypoint"
    TEXT_CUE = "text-cue"
    IMAGINED = "imagined-interaction"


SPATIAL_TYPES = frozenset({EvidenceType.BOX, EvidenceType.MASK, EvidenceType.KEYPOINT})
TEXTUAL_TYPES = frozenset({EvidenceType.TEXT_CUE, EvidenceType.IMAGINED})

SENTINEL_SUMMARY = "empty-result"


@dataclass(frozen=True)
class TextCue:
    summary: str
    semantic_agreement: bool

    def __post_init__(self):
        if not self.summary:
            raise ValueError("text cue summary must be non-empty")


@dataclass(frozen=True)
class EvidenceRecord:
    kind: EvidenceType
    payload: object  # Box | Mask | KeyPoint | TextCue
    roi: Box
    scale: int
    producer: str
    cost: float
    step: int
    self_confidence: float
    record_id: int

    @property
    def is_sentinel(self) -> bool:
        return (self.kind == EvidenceType.TEXT_CUE
                and isinstance(self.payload, TextCue)
                and self.payload.summary == SENTINEL_SUMMARY)

    def global_mask(self, grid: Grid) -> Mask | None:
        """Mask-form of a spatial payload in the global frame, if any."""
        if self.kind == EvidenceType.MASK:
            return project_to_global(self.payload, RoiTransform(self.roi, self.scale), grid)
        if self.kind == EvidenceType.BOX:
            from .geometry import chi_fill
            return chi_fill(self.payload, grid)
        return None


class EvidenceStore:
    """Ordered, append-only list of evidence records for one episode."""

    def __init__(self, grid: Grid):
        self.grid = grid
        self._records: list[EvidenceRecord] = []
        self.rejections: list[tuple[int, str]] = []  # (step, reason)
        self._next_id = 1

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> tuple[EvidenceRecord, ...]:
        return tuple(self._records)

    @property
    def cumulative_cost(self) -> float:
        return sum(r.cost for r in self._records)

    # -- ingestion -------------------------------------------------------

    def parse_and_append(self, raw, action, step: int) -> list[int]:
        """Wrap a raw skill output into typed records (the parsing function).

        Cost is charged on the first record of the call only; an empty
        output appends a zero-confidence sentinel so the budget ledger and
        retry logic can still observe the call.
        """
        if self._records and step < self._records[-1].step:
            raise ValueError("step index must not decrease")
        roi = action.params.roi
        scale = action.params.scale
        call_cost = raw.cost if raw.cost is not None else 1.0
        new_ids: list[int] = []
        charged = False
        for kind, payload, confidence in raw.items:
            reason = self._validate_payload(kind, payload, roi, scale)
            if reason is not None:
                self.rejections.append((step, reason))
                continue
            rec = EvidenceRecord(
                kind=kind, payload=payload, roi=roi, scale=scale,
                producer=action.skill, cost=call_cost if not charged else 0.0,
                step=step, self_confidence=float(confidence),
                record_id=self._next_id)
            charged = True
            self._next_id += 1
            self._records.append(rec)
            new_ids.append(rec.record_id)
        if not new_ids:
            rec = EvidenceRecord(
                kind=EvidenceType.TEXT_CUE,
                payload=TextCue(SENTINEL_SUMMARY, False),
                roi=roi, scale=scale, producer=action.skill, cost=call_cost,
                step=step, self_confidence=0.0, record_id=self._next_id)
            self._next_id += 1
            self._records.append(rec)
            new_ids.append(rec.record_id)
        return new_ids

    def _validate_payload(self, kind, payload, roi, scale) -> str | None:
        try:
            if kind == EvidenceType.BOX:
                payload.check_in(self.grid)
            elif kind == EvidenceType.MASK:
                expected = RoiTransform(roi, scale).local_grid()
                if payload.grid != expected:
                    return f"mask grid {payload.grid} does not match view {expected}"
            elif kind == EvidenceType.KEYPOINT:
                if not self.grid.contains_point(payload.x, payload.y):
                    return f"keypoint ({payload.x},{payload.y}) outside grid"
            elif kind in TEXTUAL_TYPES:
                if not isinstance(payload, TextCue):
                    return "text payload must be a TextCue"
            else:
                return f"unknown evidence type {kind}"
        except (GeometryError, FrameMismatchError) as exc:
            return str(exc)
        return None

    # -- queries ---------------------------------------------------------

    def _latest_per_producer(self, kinds) -> list[EvidenceRecord]:
        """All records of the latest step, per producer, restricted to kinds.

        Taking the whole latest step (not just the last record) keeps the
        diagnostics invariant under within-step insertion order.
        """
        latest_step: dict[str, int] = {}
        for r in self._records:
            if r.kind in kinds:
                latest_step[r.producer] = max(latest_step.get(r.producer, 0), r.step)
        return [r for r in self._records
                if r.kind in kinds and r.step == latest_step.get(r.producer)]

    def latest_boxes_and_masks(self, roi: Box) -> tuple[list[EvidenceRecord], list[EvidenceRecord]]:
        """Latest-per-producer boxes and masks whose ROI intersects `roi`."""
        boxes = [r for r in self._latest_per_producer({EvidenceType.BOX})
                 if r.roi.intersects(roi)]
        masks = [r for r in self._latest_per_producer({EvidenceType.MASK})
                 if r.roi.intersects(roi)]
        return boxes, masks

    def latest_keypoints(self, roi: Box) -> list[EvidenceRecord]:
        return [r for r in self._latest_per_producer({EvidenceType.KEYPOINT})
                if r.roi.intersects(roi)]

    def mask_records(self) -> list[EvidenceRecord]:
        return [r for r in self._records if r.kind == EvidenceType.MASK]

    def best_hypothesis_record(self) -> EvidenceRecord | None:
        """Highest self-confidence mask; ties go to later step then higher id."""
        masks = self.mask_records()
        if not masks:
            return None
        return max(masks, key=lambda r: (r.self_confidence, r.step, r.record_id))

    def best_hypothesis(self) -> Mask | None:
        rec = self.best_hypothesis_record()
        if rec is None:
            return None
        return rec.global_mask(self.grid)

    def stability_pairs(self) -> list[tuple[EvidenceRecord, EvidenceRecord]]:
        """Cross-scale pairs of latest-per-(producer, scale) mask/keypoint records."""
        pairs: list[tuple[EvidenceRecord, EvidenceRecord]] = []
        for kinds in ({EvidenceType.MASK}, {EvidenceType.KEYPOINT}):
            latest_step: dict[tuple[str, int], int] = {}
            for r in self._records:
                if r.kind in kinds:
                    key = (r.producer, r.scale)
                    latest_step[key] = max(latest_step.get(key, 0), r.step)
            cands = [r for r in self._records
                     if r.kind in kinds and r.step == latest_step.get((r.producer, r.scale))]
            for a, b in itertools.combinations(cands, 2):
                if a.scale != b.scale:
                    pairs.append((a, b))
        return pairs

    def pair_distance(self, a: EvidenceRecord, b: EvidenceRecord) -> float:
        """Drift between a cross-scale pair: 1-IoU for masks, normalized
        Euclidean distance for keypoints."""
        from .geometry import iou as mask_iou
        if a.kind == EvidenceType.MASK:
            return 1.0 - mask_iou(a.global_mask(self.grid), b.global_mask(self.grid))
        return point_distance_norm(a.payload, b.payload, self.grid)

    # -- serialization ---------------------------------------------------

    def record_to_json(self, r: EvidenceRecord) -> dict:
        return {
            "kind": r.kind.value,
            "payload": payload_to_json(r.kind, r.payload),
            "roi": r.roi.to_list(),
            "scale": r.scale,
            "producer": r.producer,
            "cost": r.cost,
            "step": r.step,
            "confidence": r.self_confidence,
            "id": r.record_id,
        }

    def to_json_lines(self) -> list[str]:
        return [json.dumps(self.record_to_json(r), sort_keys=True) for r in self._records]

    @staticmethod
    def from_json_lines(lines, grid: Grid) -> "EvidenceStore":
        store = EvidenceStore(grid)
        for line in lines:
            obj = json.loads(line)
            kind = EvidenceType(obj["kind"])
            roi = Box.from_list(obj["roi"])
            payload = payload_from_json(kind, obj["payload"])
            rec = EvidenceRecord(
                kind=kind, payload=payload, roi=roi, scale=int(obj["scale"]),
                producer=obj["producer"], cost=float(obj["cost"]),
                step=int(obj["step"]), self_confidence=float(obj["confidence"]),
                record_id=int(obj["id"]))
            store._records.append(rec)
            store._next_id = max(store._next_id, rec.record_id + 1)
        return store


def payload_to_json(kind: EvidenceType, payload) -> dict:
    if kind == EvidenceType.BOX:
        return {"box": payload.to_list()}
    if kind == EvidenceType.MASK:
        return {"mask": {"grid": [payload.grid.width, payload.grid.height],
                         "runs": [list(run) for run in payload.runs]}}
    if kind == EvidenceType.KEYPOINT:
        return {"point": [float(payload.x), float(payload.y)],
                "confidence": float(payload.confidence)}
    return {"text": payload.summary, "agreement": payload.semantic_agreement}


def payload_from_json(kind: EvidenceType, obj: dict):
    if kind == EvidenceType.BOX:
        return Box.from_list(obj["box"])
    if kind == EvidenceType.MASK:
        m = obj["mask"]
        return Mask(Grid(int(m["grid"][0]), int(m["grid"][1])),
                    tuple((int(s), int(l)) for s, l in m["runs"]))
    if kind == EvidenceType.KEYPOINT:
        return KeyPoint(float(obj["point"][0]), float(obj["point"][1]),
                        float(obj.get("confidence", 1.0)))
    return TextCue(obj["text"], bool(obj["agreement"]))

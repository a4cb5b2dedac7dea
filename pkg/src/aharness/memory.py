"""Two-tier episodic memory with hashed embeddings.

A large curated bank holds reference masks and solved action sequences; a
small test-time bank holds recent verified episodes and evicts FIFO into
consolidated capsules. Retrieval pools both tiers (capsules included) and
ranks by dot product over unit-norm vectors.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, Grid, KeyPoint, Mask
from .skills import SkillAction, SkillParams

log = logging.getLogger(__name__)

VISUAL_DIM = 192
TEXT_DIM = 64
SIMILARITY_FLOOR = 0.6


def _feature_hash(tokens, dim: int) -> np.ndarray:
    v = np.zeros(dim, dtype=np.float64)
    for t in tokens:
        h = hashlib.sha256(t.encode("utf-8")).digest()
        idx = int.from_bytes(h[:4], "big") % dim
        v[idx] += 1.0 if h[4] % 2 == 0 else -1.0
    return v


def _l2(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v / n if n > 0 else v


def embed(descriptor, instruction: str, per_half_norm: bool = False) -> np.ndarray:
    """Unit-norm concatenation of hashed descriptor and instruction halves.

    Empty inputs degrade to a uniform low-information half rather than zeros
    so the result still normalizes.
    """
    vis_tokens = list(descriptor)
    txt_tokens = [w for w in instruction.lower().split() if w]
    vis = _feature_hash(vis_tokens, VISUAL_DIM) if vis_tokens else \
        np.full(VISUAL_DIM, 1e-3)
    txt = _feature_hash(txt_tokens, TEXT_DIM) if txt_tokens else \
        np.full(TEXT_DIM, 1e-3)
    if per_half_norm:
        vis, txt = _l2(vis), _l2(txt)
    return _l2(np.concatenate([vis, txt]))


@dataclass
class EvidenceSummary:
    type_counts: dict
    omega: float = 0.0
    zeta: float = 0.0
    mu: float = 0.0
    v: float = 0.0
    hypothesis_box: Box | None = None
    step_params: tuple = ()        # (skill, roi list, scale) per step

    def to_json(self) -> dict:
        return {"type_counts": dict(self.type_counts), "omega": self.omega,
                "zeta": self.zeta, "mu": self.mu, "v": self.v,
                "hypothesis_box": None if self.hypothesis_box is None
                else self.hypothesis_box.to_list(),
                "step_params": [list(s) for s in self.step_params]}

    @classmethod
    def from_json(cls, d: dict) -> "EvidenceSummary":
        hb = d.get("hypothesis_box")
        return cls(type_counts=d.get("type_counts", {}), omega=d["omega"],
                   zeta=d["zeta"], mu=d["mu"], v=d["v"],
                   hypothesis_box=None if hb is None else Box.from_list(hb),
                   step_params=tuple(tuple(s) for s in d.get("step_params", [])))

    def merged_with(self, other: "EvidenceSummary", w_self: int, w_other: int) -> "EvidenceSummary":
        total = w_self + w_other
        counts = dict(self.type_counts)
        for k, v in other.type_counts.items():
            counts[k] = counts.get(k, 0) + v
        avg = lambda a, b: (a * w_self + b * w_other) / total
        return EvidenceSummary(type_counts=counts,
                               omega=avg(self.omega, other.omega),
                               zeta=avg(self.zeta, other.zeta),
                               mu=avg(self.mu, other.mu),
                               v=avg(self.v, other.v),
                               hypothesis_box=self.hypothesis_box,
                               step_params=self.step_params)


def param_ranges(actions) -> dict:
    """Per-skill min/max over the scalar action parameters."""
    out: dict = {}
    for a in actions:
        scalars = {"scale": float(a.params.scale),
                   "roi_w": float(a.params.roi.width),
                   "roi_h": float(a.params.roi.height)}
        r = out.setdefault(a.skill, {})
        for k, v in scalars.items():
            lo, hi = r.get(k, (v, v))
            r[k] = (min(lo, v), max(hi, v))
    return out


def _union_ranges(a: dict, b: dict) -> dict:
    out = {k: dict(v) for k, v in a.items()}
    for skill, rng in b.items():
        r = out.setdefault(skill, {})
        for k, (lo, hi) in rng.items():
            plo, phi = r.get(k, (lo, hi))
            r[k] = (min(plo, lo), max(phi, hi))
    return out


@dataclass
class MemoryEntry:
    embedding: np.ndarray
    action_sequence: tuple
    param_ranges: dict
    evidence_summary: EvidenceSummary
    outcome_score: float
    inserted_at: int
    tier: str                      # "cs" or "tt"
    reference_mask: Mask | None = None
    source_grid: Grid | None = None
    descriptor: tuple = ()
    instruction: str = ""

    def to_json(self) -> dict:
        return {
            "embedding": [float(x) for x in self.embedding],
            "actions": [_action_to_json(a) for a in self.action_sequence],
            "param_ranges": {s: {k: list(v) for k, v in r.items()}
                             for s, r in self.param_ranges.items()},
            "summary": self.evidence_summary.to_json(),
            "outcome": self.outcome_score, "inserted_at": self.inserted_at,
            "tier": self.tier,
            "reference_mask": None if self.reference_mask is None else {
                "grid": [self.reference_mask.grid.width,
                         self.reference_mask.grid.height],
                "runs": [list(r) for r in self.reference_mask.runs]},
            "source_grid": None if self.source_grid is None
            else [self.source_grid.width, self.source_grid.height],
            "descriptor": list(self.descriptor), "instruction": self.instruction,
        }

    @classmethod
    def from_json(cls, d: dict) -> "MemoryEntry":
        rm = d.get("reference_mask")
        sg = d.get("source_grid")
        return cls(
            embedding=np.asarray(d["embedding"], dtype=np.float64),
            action_sequence=tuple(_action_from_json(a) for a in d["actions"]),
            param_ranges={s: {k: tuple(v) for k, v in r.items()}
                          for s, r in d["param_ranges"].items()},
            evidence_summary=EvidenceSummary.from_json(d["summary"]),
            outcome_score=d["outcome"], inserted_at=d["inserted_at"],
            tier=d["tier"],
            reference_mask=None if rm is None else Mask(
                Grid(*rm["grid"]), tuple(tuple(r) for r in rm["runs"])),
            source_grid=None if sg is None else Grid(*sg),
            descriptor=tuple(d.get("descriptor", ())),
            instruction=d.get("instruction", ""))


def _action_to_json(a: SkillAction) -> dict:
    pp = a.params.prompt_point
    return {"skill": a.skill, "roi": a.params.roi.to_list(),
            "scale": a.params.scale, "query": a.params.query,
            "prompt_point": None if pp is None else [pp.x, pp.y, pp.confidence],
            "extras": [list(kv) for kv in a.params.extras]}


def _action_from_json(d: dict) -> SkillAction:
    pp = d.get("prompt_point")
    return SkillAction(d["skill"], SkillParams(
        roi=Box.from_list(d["roi"]), scale=d["scale"], query=d.get("query", ""),
        prompt_point=None if pp is None else KeyPoint(pp[0], pp[1], pp[2]),
        extras=tuple((k, v) for k, v in d.get("extras", []))))


@dataclass
class ExperienceCapsule:
    embedding: np.ndarray
    evidence_summary: EvidenceSummary
    param_ranges: dict
    merge_count: int
    outcome_score: float
    inserted_at: int
    tier: str = "capsule"
    action_sequence: tuple = ()
    reference_mask: Mask | None = None

    def to_json(self) -> dict:
        return {"capsule": True,
                "embedding": [float(x) for x in self.embedding],
                "summary": self.evidence_summary.to_json(),
                "param_ranges": {s: {k: list(v) for k, v in r.items()}
                                 for s, r in self.param_ranges.items()},
                "merge_count": self.merge_count,
                "outcome": self.outcome_score,
                "inserted_at": self.inserted_at}

    @classmethod
    def from_json(cls, d: dict) -> "ExperienceCapsule":
        return cls(embedding=np.asarray(d["embedding"], dtype=np.float64),
                   evidence_summary=EvidenceSummary.from_json(d["summary"]),
                   param_ranges={s: {k: tuple(v) for k, v in r.items()}
                                 for s, r in d["param_ranges"].items()},
                   merge_count=d["merge_count"], outcome_score=d["outcome"],
                   inserted_at=d["inserted_at"])

    def merge(self, other: "ExperienceCapsule"):
        total = self.merge_count + other.merge_count
        self.embedding = _l2((self.embedding * self.merge_count
                              + other.embedding * other.merge_count) / total)
        self.evidence_summary = self.evidence_summary.merged_with(
            other.evidence_summary, self.merge_count, other.merge_count)
        self.param_ranges = _union_ranges(self.param_ranges, other.param_ranges)
        self.outcome_score = (self.outcome_score * self.merge_count
                              + other.outcome_score * other.merge_count) / total
        self.merge_count = total
        self.inserted_at = max(self.inserted_at, other.inserted_at)


@dataclass
class RetrievalHit:
    entry: object                  # MemoryEntry or ExperienceCapsule
    similarity: float

    def to_json(self) -> dict:
        return {"similarity": self.similarity, "entry": self.entry.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "RetrievalHit":
        e = d["entry"]
        entry = (ExperienceCapsule.from_json(e) if e.get("capsule")
                 else MemoryEntry.from_json(e))
        return cls(entry=entry, similarity=d["similarity"])


@dataclass
class MemoryStore:
    cs_capacity: int = 1000
    tt_capacity: int = 80
    cs_bank: list = field(default_factory=list)
    tt_bank: list = field(default_factory=list)
    capsules: list = field(default_factory=list)
    _counter: int = 0

    def _next(self) -> int:
        self._counter += 1
        return self._counter

    def seed_cs(self, library) -> int:
        """Populate the curated bank; excess beyond capacity is rejected."""
        stored = 0
        for descriptor, instruction, mask, actions in library:
            if len(self.cs_bank) >= self.cs_capacity:
                log.warning("curated bank full; rejecting excess library items")
                break
            self.cs_bank.append(MemoryEntry(
                embedding=embed(descriptor, instruction),
                action_sequence=tuple(actions),
                param_ranges=param_ranges(actions),
                evidence_summary=EvidenceSummary(
                    type_counts={}, omega=1.0, zeta=1.0, mu=1.0, v=1.0,
                    hypothesis_box=mask.bbox()),
                outcome_score=1.0, inserted_at=self._next(), tier="cs",
                reference_mask=mask, source_grid=mask.grid,
                descriptor=tuple(descriptor), instruction=instruction))
            stored += 1
        return stored

    def write_back(self, descriptor, instruction: str, accepted: bool,
                   actions, summary: EvidenceSummary, outcome_score: float,
                   grid: Grid, mask: Mask | None = None):
        """Append a verified episode; rejected episodes never touch the bank."""
        if not accepted:
            return
        self.tt_bank.append(MemoryEntry(
            embedding=embed(descriptor, instruction),
            action_sequence=tuple(actions), param_ranges=param_ranges(actions),
            evidence_summary=summary, outcome_score=outcome_score,
            inserted_at=self._next(), tier="tt", reference_mask=mask,
            source_grid=grid, descriptor=tuple(descriptor),
            instruction=instruction))
        self.metabolize()

    def metabolize(self):
        """Enforce capacity: FIFO-evict into capsules, merge when those fill."""
        while len(self.tt_bank) > self.tt_capacity:
            oldest = min(self.tt_bank, key=lambda e: e.inserted_at)
            self.tt_bank.remove(oldest)
            self.capsules.append(ExperienceCapsule(
                embedding=oldest.embedding.copy(),
                evidence_summary=oldest.evidence_summary,
                param_ranges=oldest.param_ranges, merge_count=1,
                outcome_score=oldest.outcome_score,
                inserted_at=oldest.inserted_at))
            if len(self.capsules) > self.tt_capacity:
                victim = min(self.capsules, key=lambda c: c.inserted_at)
                self.capsules.remove(victim)
                if self.capsules:
                    nearest = max(self.capsules,
                                  key=lambda c: float(c.embedding @ victim.embedding))
                    nearest.merge(victim)

    def retrieve(self, descriptor, instruction: str, n: int = 2) -> list[RetrievalHit]:
        """Top-n across both tiers and capsules; ties by outcome then recency."""
        if n < 1:
            return []
        q = embed(descriptor, instruction)
        pool = self.cs_bank + self.tt_bank + self.capsules
        scored = [(float(e.embedding @ q), e) for e in pool]
        scored.sort(key=lambda t: (-t[0], -t[1].outcome_score, -t[1].inserted_at))
        return [RetrievalHit(entry=e, similarity=s) for s, e in scored[:n]]

    def snapshot_tt(self) -> str:
        """One entry per line; used by the differential gate test."""
        return "\n".join(json.dumps(e.to_json(), sort_keys=True)
                         for e in self.tt_bank)

    def save(self, path: str):
        with open(path, "w") as f:
            f.write(json.dumps({"kind": "meta", "cs_capacity": self.cs_capacity,
                                "tt_capacity": self.tt_capacity,
                                "counter": self._counter}) + "\n")
            for tier, bank in (("cs", self.cs_bank), ("tt", self.tt_bank)):
                for e in bank:
                    f.write(json.dumps(e.to_json()) + "\n")

    @classmethod
    def load(cls, path: str) -> "MemoryStore":
        store = None
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                d = json.loads(line)
                if d.get("kind") == "meta":
                    store = cls(cs_capacity=d["cs_capacity"],
                                tt_capacity=d["tt_capacity"])
                    store._counter = d["counter"]
                    continue
                entry = MemoryEntry.from_json(d)
                (store.cs_bank if entry.tier == "cs" else store.tt_bank).append(entry)
        if store is None:
            raise ValueError(f"no metadata line in {path}")
        return store

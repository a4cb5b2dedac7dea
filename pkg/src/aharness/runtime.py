"""Budgeted closed-loop episode driver.

One episode: retrieve priors, then loop {route, invoke, ingest, diagnose}
until the verifier commits or the budget runs out, then fuse and write the
episode back to memory only on acceptance. Fixed-chain baselines and batch
execution with usage histograms live here too.
"""

from __future__ import annotations

import dataclasses
import json
import random
from dataclasses import dataclass, field

from .config import RunConfig
from .evidence import EvidenceStore, EvidenceType
from .fusion import FusionResult, fuse
from .geometry import Box, Grid, KeyPoint
from .memory import EvidenceSummary, MemoryStore
from .router import (Router, RouterState, default_candidates, deficits,
                     first_action)
from .scenario import MetricsReport, Scene, evaluate
from .skillbridge import ConnectionLost, SkillFailure
from .skills import (NoiseModel, ParameterError, RoutingError, SkillAction,
                     SkillOutput, SkillParams, SkillRegistry, estimate_cost)

# a failed call yields an empty output (the store appends a sentinel);
# anything else is a bug and propagates
SKILL_ERRORS = (SkillFailure, ConnectionLost, ParameterError, RoutingError)
from .verifier import VerifierConfig, evaluate_step


@dataclass
class BudgetLedger:
    initial: float
    charges: list = field(default_factory=list)   # (step, action key, cost)
    fusion_cost: float = 0.0

    @property
    def charged(self) -> float:
        return sum(c for _, _, c in self.charges)

    @property
    def remaining(self) -> float:
        return self.initial - self.charged

    def charge(self, step: int, action: SkillAction, cost: float):
        self.charges.append((step, action.key(), cost))


@dataclass
class StepRecord:
    action: SkillAction
    evidence_ids: list
    report: object                # DiagnosticReport or None
    fallback: bool
    cost: float


@dataclass
class EpisodeTrace:
    scene: Scene
    instruction: str
    seed: int
    config: dict
    steps: list = field(default_factory=list)
    retrieval: list = field(default_factory=list)
    fusion: FusionResult | None = None
    accepted: bool = False
    fusion_cost: float = 0.0

    @property
    def in_loop_calls(self) -> int:
        return len(self.steps)

    @property
    def detect_calls(self) -> int:
        return sum(1 for s in self.steps if s.action.skill == "detect")

    @property
    def charged(self) -> float:
        return sum(s.cost for s in self.steps)

    def to_json(self) -> dict:
        return {
            "scene": self.scene.to_json(),
            "instruction": self.instruction,
            "seed": self.seed,
            "config": self.config,
            "steps": [{
                "skill": s.action.skill,
                "roi": s.action.params.roi.to_list(),
                "scale": s.action.params.scale,
                "query": s.action.params.query,
                "prompt_point": None if s.action.params.prompt_point is None
                else [s.action.params.prompt_point.x,
                      s.action.params.prompt_point.y],
                "evidence_ids": list(s.evidence_ids),
                "report": None if s.report is None else s.report.to_json(),
                "fallback": s.fallback,
                "cost": s.cost,
            } for s in self.steps],
            "retrieval": self.retrieval,
            "fusion": None if self.fusion is None else self.fusion.to_json(),
            "accepted": self.accepted,
            "fusion_cost": self.fusion_cost,
        }

    def save(self, path: str):
        with open(path, "w") as f:
            json.dump(self.to_json(), f)


def episode_seed(scene: Scene, config: RunConfig) -> int:
    return scene.seed * 1000003 + config.seed


def _with_step(params: SkillParams, step: int) -> SkillParams:
    extras = tuple(kv for kv in params.extras if kv[0] != "step")
    return dataclasses.replace(params, extras=extras + (("step", float(step)),))


def _noise(config: RunConfig, seed: int) -> NoiseModel:
    return NoiseModel(seed=seed, difficulty=config.noise_difficulty,
                      p_det=config.p_det, p_seg=config.p_seg,
                      p_web=config.p_web, p_dream=config.p_dream,
                      zoom_relief=config.zoom_relief)


def _memory_context(priors, floor: float, grid: Grid):
    """Remembered segment ROI and zoom cap from the best close-enough prior."""
    for hit in priors:
        if hit.similarity < floor:
            continue
        entry = hit.entry
        roi = None
        summary = getattr(entry, "evidence_summary", None)
        if summary is not None and summary.hypothesis_box is not None:
            src = getattr(entry, "source_grid", None)
            hb = summary.hypothesis_box
            if src is not None and (src.width != grid.width
                                    or src.height != grid.height):
                sx, sy = grid.width / src.width, grid.height / src.height
                hb = Box(int(hb.x_min * sx), int(hb.y_min * sy),
                         max(int(hb.x_min * sx) + 1, int(hb.x_max * sx)),
                         max(int(hb.y_min * sy) + 1, int(hb.y_max * sy)))
            roi = hb.clamped(grid)
            if roi.area == 0:
                roi = None
        cap = None
        seg_range = getattr(entry, "param_ranges", {}).get("segment")
        if seg_range and "scale" in seg_range:
            cap = int(seg_range["scale"][1])
        return roi, cap
    return None, None


def _memory_templates(priors, floor: float, grid: Grid,
                      instruction: str) -> list[SkillAction]:
    """Remembered action sequences rescaled to this grid, minus the opener."""
    from .router import _rescale_point, _rescale_roi
    out: list[SkillAction] = []
    seen: set[str] = set()
    for hit in priors:
        if hit.similarity < floor:
            continue
        src = getattr(hit.entry, "source_grid", None)
        for a in getattr(hit.entry, "action_sequence", ())[1:]:
            roi = _rescale_roi(a.params.roi, src, grid)
            if roi.area == 0:
                continue
            action = SkillAction(a.skill, SkillParams(
                roi=roi, scale=a.params.scale,
                query=a.params.query or instruction,
                prompt_point=_rescale_point(a.params.prompt_point, src, grid)))
            if action.key() not in seen:
                seen.add(action.key())
                out.append(action)
    return out


def _summarize(store: EvidenceStore, report, steps) -> EvidenceSummary:
    counts: dict = {}
    for r in store.records:
        counts[r.kind.value] = counts.get(r.kind.value, 0) + 1
    hyp = store.best_hypothesis()
    return EvidenceSummary(
        type_counts=counts,
        omega=report.omega if report else 0.0,
        zeta=report.zeta if report else 0.0,
        mu=report.mu if report else 0.0,
        v=report.v if report else 0.0,
        hypothesis_box=hyp.bbox() if hyp is not None else None,
        step_params=tuple((s.action.skill, tuple(s.action.params.roi.to_list()),
                           s.action.params.scale) for s in steps))


def run_episode(scene: Scene, instruction: str, registry: SkillRegistry,
                banks: MemoryStore | None, config: RunConfig,
                seed: int | None = None, priors_override=None):
    """Execute one adaptive episode. Returns (FusionResult, trace, accepted)."""
    if seed is None:
        seed = episode_seed(scene, config)
    vcfg = config.verifier_config()
    rcfg = config.router_config()
    noise = _noise(config, seed)
    grid = scene.grid
    store = EvidenceStore(grid)
    ledger = BudgetLedger(initial=config.budget)
    router = Router(cfg=rcfg, cost_weights=config.cost_weights)
    state = RouterState(remaining_budget=ledger.remaining)
    use_memory = (banks is not None or priors_override is not None) \
        and config.memory_enabled
    if priors_override is not None:
        priors = list(priors_override) if config.memory_enabled else []
    elif use_memory:
        priors = banks.retrieve(scene.object_descriptor, instruction,
                                n=config.top_n)
    else:
        priors = []
    memory_hit = any(h.similarity >= rcfg.similarity_floor for h in priors)
    mem_roi, mem_cap = _memory_context(priors, rcfg.similarity_floor, grid)
    memory_templates = _memory_templates(priors, rcfg.similarity_floor, grid,
                                         instruction)

    trace = EpisodeTrace(
        scene=scene, instruction=instruction, seed=seed,
        config=config.to_json(),
        retrieval=[h.to_json() for h in priors])

    active_roi, active_scale = grid.full_box(), 1
    report = None
    dreamer_used = False
    step = 0

    while step < config.max_steps:
        step += 1
        if ledger.remaining < 1e-9 and config.budget_truncation:
            break
        fallback = False
        if step == 1:
            action = first_action(priors, instruction, grid,
                                  rcfg.similarity_floor)
            if config.budget_truncation and \
                    estimate_cost(action, config.cost_weights) > ledger.remaining:
                break
            state.tried_keys.add(action.key())
        else:
            if config.verifier_enabled and report is not None:
                defs = deficits(report, vcfg,
                                store.best_hypothesis_record() is not None)
                deficiency = report.deficiency
                proposal = report.proposal
            else:
                # router-only ablation: no diagnostics, uniform uncertainty
                defs = {"omega": vcfg.omega_floor, "zeta": vcfg.tau_zeta,
                        "mu": vcfg.tau_mu}
                deficiency = "none"
                proposal = None
            defaults = default_candidates(grid, instruction, active_roi,
                                          active_scale)
            state.remaining_budget = (ledger.remaining if config.budget_truncation
                                      else float("inf"))
            cands = router.feasible_actions(state, proposal, defaults,
                                            memory_templates)
            decision = router.select_action(state, cands, deficiency, defs,
                                            proposal)
            if decision is None:
                break
            action = decision.action
            fallback = decision.fallback

        params = _with_step(action.params, step)
        charged_action = SkillAction(action.skill, params)
        try:
            out = registry.invoke(charged_action, scene, instruction, noise)
        except SKILL_ERRORS:
            out = SkillOutput(action.skill, [], cost=1.0)
        ids = store.parse_and_append(out, charged_action, step)
        ledger.charge(step, charged_action, out.cost)
        if action.skill == "zoom" or params.scale > active_scale:
            active_roi, active_scale = params.roi, params.scale
        if action.skill == "dreamer":
            dreamer_used = True

        if config.verifier_enabled:
            report = evaluate_step(store, vcfg, step, active_roi, active_scale,
                                   memory_hit, instruction, dreamer_used,
                                   propose=True, memory_roi=mem_roi,
                                   memory_scale_cap=mem_cap)
        trace.steps.append(StepRecord(action=charged_action, evidence_ids=ids,
                                      report=report if config.verifier_enabled
                                      else None, fallback=fallback,
                                      cost=out.cost))
        if config.verifier_enabled and report.commit:
            break
        if config.budget_truncation and ledger.remaining <= 0:
            break

    fusion_step = step + 1
    fusion_actions: list[SkillAction] = []

    def refine(a: SkillAction) -> SkillOutput:
        p = _with_step(a.params, fusion_step)
        fusion_actions.append(SkillAction(a.skill, p))
        ledger.fusion_cost += estimate_cost(a, config.cost_weights)
        try:
            return registry.invoke(SkillAction(a.skill, p), scene,
                                   instruction, noise)
        except SKILL_ERRORS:
            return SkillOutput(a.skill, [], cost=1.0)

    result = fuse(store, vcfg, priors if use_memory else [], instruction,
                  refine_fn=refine if "segment" in registry else None)
    accepted = bool(config.verifier_enabled and report is not None
                    and report.commit)
    trace.fusion = result
    trace.accepted = accepted
    trace.fusion_cost = ledger.fusion_cost

    if not config.verifier_enabled and trace.steps:
        # router-only ablation accepts whatever the budget produced
        accepted = True
        trace.accepted = True

    if use_memory and banks is not None:
        banks.write_back(
            scene.object_descriptor, instruction, accepted,
            actions=tuple(s.action for s in trace.steps) + tuple(fusion_actions),
            summary=_summarize(store, report if config.verifier_enabled else None,
                               trace.steps),
            outcome_score=report.v if (config.verifier_enabled and report) else 0.5,
            grid=grid, mask=None)
    return result, trace, accepted


def run_fixed_chain(scene: Scene, instruction: str, registry: SkillRegistry,
                    config: RunConfig, variant: str, seed: int | None = None):
    """Non-adaptive baselines: det_seg (2 calls) or full_chain (6 calls)."""
    if variant not in ("det_seg", "full_chain"):
        raise ValueError(f"unknown fixed-chain variant {variant!r}")
    if seed is None:
        seed = episode_seed(scene, config)
    vcfg = config.verifier_config()
    noise = _noise(config, seed)
    grid = scene.grid
    store = EvidenceStore(grid)
    ledger = BudgetLedger(initial=float("inf"))
    trace = EpisodeTrace(scene=scene, instruction=instruction, seed=seed,
                         config=config.to_json())
    active_roi, active_scale = grid.full_box(), 1
    step = 0

    def run(action: SkillAction):
        nonlocal step, active_roi, active_scale
        step += 1
        params = _with_step(action.params, step)
        charged = SkillAction(action.skill, params)
        try:
            out = registry.invoke(charged, scene, instruction, noise)
        except SKILL_ERRORS:
            out = SkillOutput(action.skill, [], cost=1.0)
        ids = store.parse_and_append(out, charged, step)
        ledger.charge(step, charged, out.cost)
        if action.skill == "zoom" or params.scale > active_scale:
            active_roi, active_scale = params.roi, params.scale
        trace.steps.append(StepRecord(action=charged, evidence_ids=ids,
                                      report=None, fallback=False,
                                      cost=out.cost))

    def best_box() -> Box | None:
        boxes, _ = store.latest_boxes_and_masks(grid.full_box())
        live = [b for b in boxes if not b.is_sentinel]
        if not live:
            return None
        return max(live, key=lambda r: (r.self_confidence, r.record_id)).payload

    full = grid.full_box()
    run(SkillAction("detect", SkillParams(roi=full, scale=1, query=instruction)))
    bb = best_box()
    seg_roi = bb.padded(0.10, grid).clamped(grid) if bb is not None else full
    run(SkillAction("segment", SkillParams(
        roi=seg_roi, scale=1, query=instruction,
        prompt_point=KeyPoint(*seg_roi.center))))

    if variant == "full_chain":
        center = (bb.center if bb is not None else full.center)
        w, h = grid.width // 2, grid.height // 2
        zoom_roi = Box.bounded(center[0] - w / 2, center[1] - h / 2,
                               center[0] + w / 2, center[1] + h / 2, grid)
        if zoom_roi.area == 0:
            zoom_roi = full
        # zoom and re-detection bundled into one zoomed detect call
        run(SkillAction("detect", SkillParams(roi=zoom_roi, scale=2,
                                              query=instruction)))
        run(SkillAction("web_search", SkillParams(roi=full, scale=1,
                                                  query=instruction)))
        run(SkillAction("dreamer", SkillParams(roi=full, scale=1,
                                               query=instruction)))
        hyp = store.best_hypothesis()
        prompt = hyp.centroid() if hyp is not None and not hyp.is_empty else \
            KeyPoint(*active_roi.center)
        run(SkillAction("segment", SkillParams(
            roi=active_roi, scale=active_scale, query=instruction,
            prompt_point=prompt)))

    fusion_step = step + 1

    def refine(a: SkillAction) -> SkillOutput:
        p = _with_step(a.params, fusion_step)
        ledger.fusion_cost += estimate_cost(a, config.cost_weights)
        try:
            return registry.invoke(SkillAction(a.skill, p), scene,
                                   instruction, noise)
        except SKILL_ERRORS:
            return SkillOutput(a.skill, [], cost=1.0)

    result = fuse(store, vcfg, [], instruction,
                  refine_fn=refine if "segment" in registry else None)
    trace.fusion = result
    trace.fusion_cost = ledger.fusion_cost
    return result, trace


@dataclass
class BatchResult:
    metrics: MetricsReport
    traces: list
    results: list
    usage_thirds: tuple          # mean in-loop calls (early, middle, late)
    fallback_rate: float
    accepted_rate: float

    def to_json(self) -> dict:
        return {"metrics": self.metrics.to_json(),
                "usage_thirds": list(self.usage_thirds),
                "fallback_rate": self.fallback_rate,
                "accepted_rate": self.accepted_rate}


def _usage_thirds(traces) -> tuple:
    n = len(traces)
    if n == 0:
        return (0.0, 0.0, 0.0)
    cut1, cut2 = n // 3, 2 * n // 3
    parts = [traces[:cut1] or traces, traces[cut1:cut2] or traces,
             traces[cut2:] or traces]
    return tuple(sum(t.in_loop_calls for t in p) / len(p) for p in parts)


def run_single_batch(scenes, banks: MemoryStore | None, config: RunConfig,
                     registry: SkillRegistry) -> BatchResult:
    traces, preds, gts, results = [], [], [], []
    accepted_n = 0
    fb_calls = fb_total = 0
    for scene in scenes:
        if config.mode == "adaptive":
            result, trace, accepted = run_episode(scene, scene.instruction,
                                                  registry, banks, config)
        else:
            result, trace = run_fixed_chain(scene, scene.instruction, registry,
                                            config, config.mode)
            accepted = False
        traces.append(trace)
        preds.append(result.mask)
        gts.append(scene.target_gt)
        results.append(result)
        accepted_n += int(accepted)
        fb_calls += sum(1 for s in trace.steps if s.fallback)
        fb_total += max(0, len(trace.steps) - 1)
    metrics = evaluate(preds, gts, traces)
    return BatchResult(metrics=metrics, traces=traces, results=results,
                       usage_thirds=_usage_thirds(traces),
                       fallback_rate=fb_calls / fb_total if fb_total else 0.0,
                       accepted_rate=accepted_n / len(scenes) if scenes else 0.0)


def run_batch(scenes, banks: MemoryStore | None, config: RunConfig,
              registry: SkillRegistry, orderings: int | None = None):
    """One or more seeded orderings. Returns (list of BatchResult, summary)."""
    import copy
    k = config.orderings if orderings is None else orderings
    runs = []
    for i in range(k):
        order = list(scenes)
        if i > 0 or k > 1:
            random.Random(f"order|{config.seed}|{i}").shuffle(order)
        bank_copy = copy.deepcopy(banks) if banks is not None else None
        runs.append(run_single_batch(order, bank_copy, config, registry))
    gious = [r.metrics.giou for r in runs]
    calls = [r.metrics.mean_skill_calls for r in runs]
    mean = lambda xs: sum(xs) / len(xs)
    dev = lambda xs: (mean([(x - mean(xs)) ** 2 for x in xs])) ** 0.5
    summary = {"orderings": k,
               "giou_mean": mean(gious), "giou_dev": dev(gious),
               "calls_mean": mean(calls), "calls_dev": dev(calls)}
    return runs, summary


def replay_trace(trace_json: dict, registry: SkillRegistry):
    """Re-execute a recorded episode; returns (FusionResult, trace)."""
    from .memory import RetrievalHit
    scene = Scene.from_json(trace_json["scene"])
    cfg_dict = dict(trace_json["config"])
    cfg_dict["base_weights"] = dict(cfg_dict.get("base_weights", {}))
    config = RunConfig(**cfg_dict)
    if config.mode == "adaptive":
        priors = [RetrievalHit.from_json(h)
                  for h in trace_json.get("retrieval", [])]
        result, trace, _ = run_episode(scene, trace_json["instruction"],
                                       registry, None, config,
                                       seed=trace_json["seed"],
                                       priors_override=priors)
    else:
        result, trace = run_fixed_chain(scene, trace_json["instruction"],
                                        registry, config, config.mode,
                                        seed=trace_json["seed"])
    return result, trace

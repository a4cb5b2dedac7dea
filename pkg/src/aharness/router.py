"""Budget-aware action selection.

Candidates are scored by estimated commit-score gain over cost. The verifier
proposal gets the full gain on the flagged dimension; everything else is
discounted as off-target. When the heuristic cannot separate the leaders, or
the same deficiency keeps recurring, selection defers to a pluggable decision
brain (a deterministic stub here).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .geometry import Box, Grid, KeyPoint
from .skills import SkillAction, SkillParams, estimate_cost
from .verifier import SKILL_DIMENSION, DiagnosticReport, VerifierConfig


@dataclass
class RouterConfig:
    lambda_omega: float = 1.0
    lambda_zeta: float = 0.8
    lambda_mu: float = 0.6
    eta_off: float = 0.5
    tie_gap: float = 0.10
    repeat_limit: int = 2
    similarity_floor: float = 0.6

    def __post_init__(self):
        if not 0 < self.tie_gap < 1:
            raise ValueError("tie_gap must be in (0, 1)")
        for v in (self.lambda_omega, self.lambda_zeta, self.lambda_mu, self.eta_off):
            if v < 0:
                raise ValueError("router scales must be nonnegative")

    def lam(self, dim: str) -> float:
        return {"omega": self.lambda_omega, "zeta": self.lambda_zeta,
                "mu": self.lambda_mu}[dim]


@dataclass
class RouterState:
    remaining_budget: float
    last_proposal: SkillAction | None = None
    consecutive_same_deficiency: int = 0
    last_deficiency: str = ""
    tried_keys: set = field(default_factory=set)


@dataclass
class GainEstimate:
    action: SkillAction
    delta_v: float
    cost: float
    utility: float
    is_proposal: bool = False


def deficits(report: DiagnosticReport, cfg: VerifierConfig,
             has_hypothesis: bool) -> dict[str, float]:
    return {
        "omega": max(0.0, cfg.omega_floor - report.omega),
        "zeta": max(0.0, cfg.tau_zeta - report.zeta),
        "mu": max(0.0, cfg.tau_mu - report.mu_squashed) if has_hypothesis else 0.0,
    }


def estimate_gain(action: SkillAction, deficiency: str,
                  defs: dict[str, float], cfg: RouterConfig,
                  is_proposal: bool) -> float:
    if is_proposal:
        return cfg.lam(deficiency) * defs.get(deficiency, 0.0)
    dim = SKILL_DIMENSION.get(action.skill)
    if dim is None:
        return 0.0
    return cfg.lam(dim) * defs.get(dim, 0.0) * cfg.eta_off


def default_candidates(grid: Grid, instruction: str,
                       active_roi: Box, active_scale: int) -> list[SkillAction]:
    """One default-parameter template per simulated skill."""
    full = grid.full_box()
    cx, cy = active_roi.center
    zoom_roi = Box.bounded(cx - active_roi.width / 4, cy - active_roi.height / 4,
                           cx + active_roi.width / 4, cy + active_roi.height / 4,
                           grid)
    if zoom_roi.area == 0:
        zoom_roi = active_roi
    return [
        SkillAction("detect", SkillParams(roi=full, scale=1, query=instruction)),
        SkillAction("segment", SkillParams(roi=active_roi, scale=active_scale,
                                           query=instruction,
                                           prompt_point=KeyPoint(*active_roi.center))),
        SkillAction("zoom", SkillParams(roi=zoom_roi,
                                        scale=min(8, active_scale * 2),
                                        query=instruction)),
        SkillAction("web_search", SkillParams(roi=full, scale=1, query=instruction)),
        SkillAction("dreamer", SkillParams(roi=full, scale=1, query=instruction)),
    ]


@dataclass
class RoutingDecision:
    action: SkillAction
    estimate: GainEstimate
    fallback: bool
    candidates: list


@dataclass
class Router:
    cfg: RouterConfig = field(default_factory=RouterConfig)
    cost_weights: dict = field(default_factory=dict)
    decision_brain: object = None
    fallback_count: int = 0
    decision_count: int = 0

    def feasible_actions(self, state: RouterState, proposal: SkillAction | None,
                         defaults: list[SkillAction],
                         memory_actions: list[SkillAction]) -> list[GainEstimate]:
        """Candidate set after the budget and repeat filters; gains unset."""
        pool: list[tuple[SkillAction, bool]] = []
        seen: set[str] = set()
        ordered = ([(proposal, True)] if proposal is not None else [])
        ordered += [(a, False) for a in memory_actions + defaults]
        for a, is_prop in ordered:
            k = a.key()
            if k in seen or k in state.tried_keys:
                continue
            seen.add(k)
            pool.append((a, is_prop))
        out = []
        for a, is_prop in pool:
            cost = estimate_cost(a, self.cost_weights)
            if cost > state.remaining_budget:
                continue
            out.append(GainEstimate(action=a, delta_v=0.0, cost=cost,
                                    utility=0.0, is_proposal=is_prop))
        return out

    def select_action(self, state: RouterState, candidates: list[GainEstimate],
                      deficiency: str, defs: dict[str, float],
                      proposal: SkillAction | None) -> RoutingDecision | None:
        """Score candidates and pick one; None when nothing is feasible."""
        if not candidates:
            return None
        self.decision_count += 1
        for c in candidates:
            c.delta_v = estimate_gain(c.action, deficiency, defs, self.cfg,
                                      c.is_proposal)
            c.utility = c.delta_v / c.cost if c.cost > 0 else 0.0
        from .skills import SKILL_IDS
        ranked = sorted(candidates,
                        key=lambda c: (-c.utility, not c.is_proposal,
                                       SKILL_IDS.get(c.action.skill, 99),
                                       c.action.params.key()))
        u1 = ranked[0].utility
        u2 = ranked[1].utility if len(ranked) > 1 else 0.0
        streak = (state.consecutive_same_deficiency + 1
                  if deficiency == state.last_deficiency else 1)
        near_tied = True if u1 <= 0.0 else (u1 - u2) / u1 < self.cfg.tie_gap
        use_fallback = near_tied or streak >= self.cfg.repeat_limit
        if use_fallback:
            self.fallback_count += 1
            choice = self._consult_brain(ranked, proposal)
        else:
            choice = ranked[0]
        state.consecutive_same_deficiency = streak
        state.last_deficiency = deficiency
        state.tried_keys.add(choice.action.key())
        state.last_proposal = proposal
        return RoutingDecision(action=choice.action, estimate=choice,
                               fallback=use_fallback, candidates=ranked)

    def _consult_brain(self, ranked: list[GainEstimate],
                       proposal: SkillAction | None) -> GainEstimate:
        if self.decision_brain is not None:
            pick = self.decision_brain(ranked, proposal)
            if pick in ranked:
                return pick
            # non-candidate answers are rejected; fall through to the heuristic
        if proposal is not None:
            for c in ranked:
                if c.is_proposal:
                    return c
        return ranked[0]

    def fallback_rate(self) -> float:
        if self.decision_count == 0:
            return 0.0
        return self.fallback_count / self.decision_count


def first_action(priors, instruction: str, grid: Grid,
                 similarity_floor: float = 0.6) -> SkillAction:
    """Replay a remembered opener when a close match exists, else detect."""
    for hit in priors or []:
        if hit.similarity < similarity_floor:
            continue
        seq = getattr(hit.entry, "action_sequence", ())
        if not seq:
            continue
        a = seq[0]
        roi = _rescale_roi(a.params.roi, getattr(hit.entry, "source_grid", None), grid)
        return SkillAction(a.skill, SkillParams(
            roi=roi, scale=a.params.scale, query=a.params.query or instruction,
            prompt_point=_rescale_point(a.params.prompt_point,
                                        getattr(hit.entry, "source_grid", None), grid)))
    return SkillAction("detect", SkillParams(roi=grid.full_box(), scale=1,
                                             query=instruction))


def _rescale_roi(roi: Box, source_grid: Grid | None, grid: Grid) -> Box:
    if source_grid is None or (source_grid.width == grid.width
                               and source_grid.height == grid.height):
        return roi.clamped(grid)
    sx = grid.width / source_grid.width
    sy = grid.height / source_grid.height
    return Box(int(roi.x_min * sx), int(roi.y_min * sy),
               max(int(roi.x_min * sx) + 1, int(roi.x_max * sx)),
               max(int(roi.y_min * sy) + 1, int(roi.y_max * sy))).clamped(grid)


def _rescale_point(p: KeyPoint | None, source_grid: Grid | None,
                   grid: Grid) -> KeyPoint | None:
    if p is None:
        return None
    if source_grid is None or (source_grid.width == grid.width
                               and source_grid.height == grid.height):
        return p
    return KeyPoint(p.x * grid.width / source_grid.width,
                    p.y * grid.height / source_grid.height, p.confidence)

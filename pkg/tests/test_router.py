"""Action selection: gain model, tie handling, fallback, first-step replay."""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aharness.geometry import Box, Grid, KeyPoint
from aharness.memory import MemoryEntry, RetrievalHit, embed, EvidenceSummary
from aharness.router import (
    Router,
    RouterConfig,
    RouterState,
    default_candidates,
    deficits,
    estimate_gain,
    first_action,
)
from aharness.skills import SkillAction, SkillParams
from aharness.verifier import DiagnosticReport, VerifierConfig

GRID = Grid(128, 128)
VCFG = VerifierConfig()
RCFG = RouterConfig()


def report(omega=0.5, zeta=1.0, mu_squashed=0.8):
    return DiagnosticReport(omega=omega, zeta=zeta, mu=mu_squashed,
                            mu_squashed=mu_squashed, v=0.0, commit=False,
                            deficiency="omega", proposal=None, step=1)


def segment_action(roi=None):
    roi = roi or GRID.full_box()
    return SkillAction("segment", SkillParams(roi=roi, scale=1,
                                              prompt_point=KeyPoint(*roi.center)))


class TestGainModel:
    def test_proposal_full_gain(self):
        defs = {"omega": 0.2, "zeta": 0.0, "mu": 0.0}
        g = estimate_gain(segment_action(), "omega", defs, RCFG, is_proposal=True)
        assert g == pytest.approx(0.2)

    def test_off_target_discounted(self):
        defs = {"omega": 0.0, "zeta": 0.3, "mu": 0.0}
        zoom = SkillAction("zoom", SkillParams(roi=Box(10, 10, 60, 60), scale=2))
        g = estimate_gain(zoom, "zeta", defs, RCFG, is_proposal=False)
        assert g == pytest.approx(0.8 * 0.3 * 0.5)

    def test_zero_deficit_dimension(self):
        defs = {"omega": 0.0, "zeta": 0.0, "mu": 0.0}
        web = SkillAction("web_search", SkillParams(roi=GRID.full_box()))
        assert estimate_gain(web, "mu", defs, RCFG, is_proposal=False) == 0.0


class TestDeficits:
    def test_below_thresholds(self):
        d = deficits(report(omega=0.3, zeta=0.4, mu_squashed=0.2), VCFG, True)
        assert d["omega"] == pytest.approx(0.2)
        assert d["zeta"] == pytest.approx(0.3)
        assert d["mu"] == pytest.approx(0.4)

    def test_mu_requires_hypothesis(self):
        d = deficits(report(mu_squashed=0.0), VCFG, False)
        assert d["mu"] == 0.0


def build_candidates(router, state, proposal):
    defaults = default_candidates(GRID, "grip", GRID.full_box(), 1)
    return router.feasible_actions(state, proposal, defaults, [])


class TestSelection:
    def test_clear_winner_no_fallback(self):
        router = Router()
        state = RouterState(remaining_budget=3.0)
        proposal = segment_action()
        cands = build_candidates(router, state, proposal)
        defs = {"omega": 0.4, "zeta": 0.0, "mu": 0.0}
        decision = router.select_action(state, cands, "omega", defs, proposal)
        assert decision.action == proposal and not decision.fallback

    def test_near_tied_consults_fallback(self):
        router = Router()
        state = RouterState(remaining_budget=3.0)
        cands = build_candidates(router, state, None)
        decision = router.select_action(state, cands, "omega",
                                        {"omega": 0.0, "zeta": 0.0, "mu": 0.0}, None)
        assert decision.fallback

    def test_repeat_streak_consults_fallback(self):
        router = Router()
        state = RouterState(remaining_budget=6.0)
        proposal = segment_action()
        defs = {"omega": 0.4, "zeta": 0.0, "mu": 0.0}
        first = router.select_action(state, build_candidates(router, state, proposal),
                                     "omega", defs, proposal)
        assert not first.fallback
        # same deficiency on the next retry: two in a row trips the limit
        second_prop = segment_action(Box(10, 10, 50, 50))
        second = router.select_action(state, build_candidates(router, state, second_prop),
                                      "omega", defs, second_prop)
        assert second.fallback

    def test_budget_filters_candidates(self):
        router = Router(cost_weights={"web_search": 2.5})
        state = RouterState(remaining_budget=1.0)
        cands = build_candidates(router, state, None)
        assert all(c.cost <= 1.0 for c in cands)
        assert not any(c.action.skill == "web_search" for c in cands)

    def test_tried_actions_excluded(self):
        router = Router()
        state = RouterState(remaining_budget=9.0)
        proposal = segment_action()
        decision = router.select_action(state, build_candidates(router, state, proposal),
                                        "omega", {"omega": 0.4, "zeta": 0, "mu": 0}, proposal)
        keys = {c.action.key() for c in build_candidates(router, state, proposal)}
        assert decision.action.key() not in keys

    def test_empty_candidates(self):
        router = Router()
        state = RouterState(remaining_budget=0.0)
        assert router.select_action(state, [], "omega", {}, None) is None

    def test_brain_non_candidate_rejected(self):
        rogue = lambda ranked, proposal: "not-a-candidate"
        router = Router(decision_brain=rogue)
        state = RouterState(remaining_budget=3.0)
        cands = build_candidates(router, state, None)
        decision = router.select_action(state, cands, "omega",
                                        {"omega": 0, "zeta": 0, "mu": 0}, None)
        assert decision.action in [c.action for c in cands]


def memory_hit(similarity, opener, source_grid=None):
    entry = MemoryEntry(
        embedding=embed(["mug", "handle"], "grip"),
        action_sequence=(opener,),
        param_ranges={},
        evidence_summary=EvidenceSummary(type_counts={}, omega=1, zeta=1, mu=1, v=1),
        outcome_score=0.9,
        inserted_at=0,
        tier="tt",
        source_grid=source_grid or GRID,
    )
    return RetrievalHit(entry=entry, similarity=similarity)


class TestFirstAction:
    def test_default_detect(self):
        a = first_action([], "grip the mug handle", GRID)
        assert a.skill == "detect"
        assert a.params.roi == GRID.full_box()

    def test_replays_remembered_opener(self):
        opener = SkillAction("detect", SkillParams(roi=GRID.full_box(), scale=1,
                                                   query="mug handle"))
        a = first_action([memory_hit(0.9, opener)], "grip", GRID)
        assert a.skill == "detect" and a.params.query == "mug handle"

    def test_below_floor_ignored(self):
        opener = SkillAction("segment", SkillParams(roi=GRID.full_box(), scale=1,
                                                    prompt_point=KeyPoint(5, 5)))
        a = first_action([memory_hit(0.4, opener)], "grip", GRID)
        assert a.skill == "detect"

    def test_roi_rescaled_across_grids(self):
        small = Grid(64, 64)
        opener = SkillAction("detect", SkillParams(roi=Box(16, 16, 32, 32), scale=1))
        a = first_action([memory_hit(0.9, opener, source_grid=small)], "grip", GRID)
        assert a.params.roi == Box(32, 32, 64, 64)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=400, deadline=None)
def test_proposal_dominates_unique_deficit(seed):
    """With one positive-deficit dimension and no fallback trigger, the
    proposal always wins."""
    rng = random.Random(seed)
    dim = rng.choice(["omega", "zeta", "mu"])
    defs = {"omega": 0.0, "zeta": 0.0, "mu": 0.0}
    defs[dim] = rng.uniform(0.05, 0.5)
    skill = {"omega": "segment", "zeta": "zoom", "mu": "web_search"}[dim]
    pp = KeyPoint(64, 64) if skill == "segment" else None
    proposal = SkillAction(skill, SkillParams(roi=Box(8, 8, 120, 120), scale=1,
                                              prompt_point=pp, query="x"))
    router = Router()
    state = RouterState(remaining_budget=rng.uniform(1.0, 5.0))
    cands = build_candidates(router, state, proposal)
    if not any(c.is_proposal for c in cands):
        return
    decision = router.select_action(state, cands, dim, defs, proposal)
    assert decision.action == proposal

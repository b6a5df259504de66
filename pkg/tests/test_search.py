import itertools
import math

import numpy as np
import pytest

from pdprune.analysis import SetPartition
from pdprune.errors import ConsistencyError, InfeasibleError, TooLargeError
from pdprune.plan import RemovalElement as E
from pdprune.plan import StagePlan, elements_disjoint
from pdprune.search import (AnnealingSchedule, SearchState, acceptance_probability, assign_stages,
                            brute_force_optimum, build_initial_solution, candidate_elements,
                            plan_from_json, plan_to_json, propose_neighbor, rng_stream, run_annealing,
                            selection_probabilities)

R = np.array([0.5, 0.96, 0.97, 0.9, 0.99, 0.93, 0.8, 0.95])


def _partition(p_initial, pairs, L=len(R), d=None):
    covered = {b for p in pairs for b in p}
    metric = {p: (d or {}).get(p, 0.96) for p in pairs}
    return SetPartition(list(p_initial), list(pairs), metric, [i for i in range(L) if i not in covered],
                        0.95, k=None)


def _separable(scores):
    return lambda sol: float(sum(scores[e] for e in sol))


def test_schedule_iterations():
    assert AnnealingSchedule(15, 0.85, 0.05).iterations() == 36
    assert 15 * 0.85 ** 36 < 0.05 <= 15 * 0.85 ** 35
    assert AnnealingSchedule(0.01, 0.5, 0.05).iterations() == 0
    for bad in (dict(alpha=1.0), dict(alpha=0.0), dict(T_min=0.0)):
        with pytest.raises(ValueError):
            AnnealingSchedule(**bad)


def test_initial_solution_with_pairs():
    part = _partition([4, 2], [(0, 1), (6, 7)], d={(0, 1): 0.96, (6, 7): 0.98})
    sol = build_initial_solution(part, 3, R)
    assert [str(e) for e in sol] == ["prune(2)", "prune(4)", "distill(6,7)"]


def test_initial_solution_without_pairs_fills_by_r():
    part = _partition([4, 2], [])
    sol = build_initial_solution(part, 3, R)
    assert [str(e) for e in sol] == ["prune(1)", "prune(2)", "prune(4)"]


def test_initial_solution_k1_and_infeasible():
    assert [str(e) for e in build_initial_solution(_partition([4], []), 1, R)] == ["prune(4)"]
    with pytest.raises(InfeasibleError):
        build_initial_solution(_partition([4, 2, 1, 0, 3], [(5, 6)], L=7), 9, R)
    with pytest.raises(ValueError):
        build_initial_solution(_partition([4], []), 3, R)


def test_selection_probabilities():
    r = [0.9, 0.8, 0.9]
    p = selection_probabilities([E.prune(0, r), E.distill(1, r)])
    np.testing.assert_allclose(p, [0.9 / 1.75, 0.85 / 1.75], atol=1e-12)
    assert selection_probabilities([E.prune(0, r)]).tolist() == [1.0]
    np.testing.assert_allclose(selection_probabilities([E.prune(i, [0.5] * 4) for i in range(4)]), 0.25)
    with pytest.raises(ValueError):
        selection_probabilities([])


def test_negative_weights_are_floored():
    p = selection_probabilities([E.prune(0, [-0.5, 0.5]), E.prune(1, [-0.5, 0.5])])
    assert p[0] > 0 and p.sum() == pytest.approx(1.0, abs=1e-12)


def test_acceptance_probability():
    assert acceptance_probability(0.62, 0.65, 1.0) == 1.0
    assert acceptance_probability(0.62, 0.60, 1.0) == pytest.approx(math.exp(-0.02), abs=1e-12)
    assert acceptance_probability(0.62, 0.60, 1e-6) < 1e-100
    with pytest.raises(ValueError):
        acceptance_probability(0.5, 0.4, 0.0)


def test_proposals_swap_exactly_one_element():
    part = _partition([4, 2], [(0, 1), (6, 7)])
    universe = candidate_elements(part, R)
    current = build_initial_solution(part, 3, R)
    state = SearchState(universe, current, 0.0, current, 0.0, 1.0)
    rng = rng_stream(0, "test")
    for _ in range(200):
        cand = propose_neighbor(state, rng)
        assert cand is not None
        assert len(set(cand) ^ set(current)) == 2
        assert len(cand) == 3 and elements_disjoint(cand)


def test_single_unremoved_element_is_always_chosen():
    part = _partition([0], [], L=3)
    universe = candidate_elements(part, R[:3])
    current = (E.prune(0, R), E.prune(1, R))
    state = SearchState(universe, current, 0.0, current, 0.0, 1.0)
    rng = rng_stream(1, "test")
    for _ in range(20):
        assert E.prune(2) in propose_neighbor(state, rng)


def test_stagnation_returns_none():
    # the only unremoved element overlaps both kept elements, so every swap collides
    current = (E.prune(1, R), E.prune(2, R))
    universe = (E.distill(1, R),) + current
    state = SearchState(universe, current, 0.0, current, 0.0, 1.0)
    assert propose_neighbor(state, rng_stream(0, "x"), retries=8) is None
    full = SearchState(current, current, 0.0, current, 0.0, 1.0)
    assert propose_neighbor(full, rng_stream(0, "x")) is None


def test_run_annealing_matches_brute_force_on_separable_objective():
    part = _partition([4, 2], [(0, 1), (6, 7)])
    universe = candidate_elements(part, R)
    scores = dict(zip(universe, np.random.default_rng(3).random(len(universe))))
    obj = _separable(scores)
    res = run_annealing(part, 3, AnnealingSchedule(seed=0), obj, R)
    best, f = brute_force_optimum(part, 3, obj, R)
    assert res.iterations == 36
    assert res.best_f == pytest.approx(f, abs=1e-12)
    assert res.best_f >= res.initial_f
    bests = [entry["best_f"] for entry in res.log]
    assert bests == sorted(bests)


def test_run_annealing_deterministic_and_zero_iterations():
    part = _partition([4, 2], [(0, 1), (6, 7)])
    obj = _separable({e: float(e.blocks[0]) for e in candidate_elements(part, R)})
    a = run_annealing(part, 3, AnnealingSchedule(seed=5), obj, R)
    b = run_annealing(part, 3, AnnealingSchedule(seed=5), obj, R)
    assert a.log == b.log and a.best == b.best
    z = run_annealing(part, 3, AnnealingSchedule(T0=0.01, T_min=0.05), obj, R)
    assert z.iterations == 0 and z.best == z.initial


def test_brute_force_enumerates_feasible_subsets():
    part = _partition([2], [(0, 1)], L=5)   # elements: distill(0,1), prune(2), prune(3), prune(4)
    seen = []

    def obj(sol):
        seen.append(sol)
        return 1.0
    best, f = brute_force_optimum(part, 2, obj, R[:5])
    universe = candidate_elements(part, R[:5])
    feasible = [c for c in itertools.combinations(universe, 2) if elements_disjoint(c)]
    assert len(seen) == len(feasible) <= 10
    assert best == feasible[0]     # all tied: lexicographically smallest


def test_brute_force_single_subset_and_cap():
    part = _partition([0], [], L=3)
    best, _ = brute_force_optimum(part, 3, lambda s: 0.0, R[:3])
    assert [str(e) for e in best] == ["prune(0)", "prune(1)", "prune(2)"]
    with pytest.raises(TooLargeError):
        brute_force_optimum(_partition([0], [], L=30), 10, lambda s: 0.0, np.ones(30), cap=1000)


def test_assign_stages_scripted():
    best = (E.prune(1), E.prune(3))

    def f(plan):
        return 0.70 if E.prune(1) not in plan.prefill_removals else 0.60
    plan = assign_stages(best, f, 0.03)
    assert plan.decode_only() == (E.prune(1),)
    small = assign_stages(best, lambda p: 0.61 if E.prune(1) not in p.prefill_removals else 0.60, 0.03)
    assert small.prefill_removals == small.decode_removals
    never = assign_stages(best, f, math.inf)
    assert never.prefill_removals == never.decode_removals


def test_stage_plan_consistency():
    with pytest.raises(ConsistencyError):
        StagePlan((E.prune(1),), (E.prune(2),)).check()
    with pytest.raises(ConsistencyError):
        StagePlan((), (E.prune(1), E.distill(1))).check()


def test_plan_json_roundtrip():
    plan = StagePlan((E.prune(2, R),), (E.prune(2, R), E.distill(3, R)))
    text = plan_to_json(plan, k=2, schedule=AnnealingSchedule(), extra_field=1)
    back, doc = plan_from_json(text)
    assert back == plan
    assert doc["k"] == 2 and doc["schedule"]["T0"] == 15.0 and doc["extra_field"] == 1
    assert [e.source for e in back.decode_removals] == [2, 3]

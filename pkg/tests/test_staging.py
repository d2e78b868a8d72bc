import itertools
import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from hiersim.circuit import attach_single_qubit_gates, generate, make_circuit, non_insular_set
from hiersim.staging import (
    BudgetExceeded, InfeasibleShape, MachineShape, NoPlanWithinLimit, SolveStatus, Stage,
    StagingPlan, Stuck, build_ilp, greedy_stage, solve_ilp, stage, staging_cost, to_lp,
    validate_staging,
)

from oracles import brute_staging, random_circuit

SIX_H = make_circuit(6, [("H", [q]) for q in range(6)])


def _attached(c):
    return attach_single_qubit_gates(c) if any(g.kind.arity > 1 for g in c.gates) else c


def test_shape_validation():
    with pytest.raises(ValueError):
        MachineShape(0, 1, 1)
    with pytest.raises(ValueError):
        MachineShape(2, 0, 0, c=0.5)
    with pytest.raises(ValueError):
        MachineShape(2, 0, 0).check(generate("ghz", 3))


def test_variable_counts_ghz3():
    m = build_ilp(_attached(generate("ghz", 3)), MachineShape(2, 0, 1), 1)
    assert m.family_counts() == {"A": 3, "B": 3, "F": 2, "S": 0, "T": 0}


def test_variable_counts_qft6():
    m = build_ilp(_attached(generate("qft", 6)), MachineShape(3, 0, 3), 2)
    assert m.family_counts() == {"A": 12, "B": 12, "F": 30, "S": 6, "T": 6}


def test_ghz3_single_stage_needs_three_locals():
    # after attachment H(q0) makes q0 non-insular on CX(0,1), so {0,1,2} must all be local
    c = _attached(generate("ghz", 3))
    assert solve_ilp(build_ilp(c, MachineShape(2, 0, 1), 1)).status is SolveStatus.INFEASIBLE
    assert brute_staging(c, 2, 0, 1, 3.0, s_max=1) is None
    res = solve_ilp(build_ilp(c, MachineShape(3, 0, 0), 1))
    assert res.status is SolveStatus.FEASIBLE and res.objective == 0


def test_single_stage_objective_is_zero():
    c = _attached(generate("qft", 5))
    m = build_ilp(c, MachineShape(5, 0, 0), 1)
    assert all(v == 0 for v in m.objective.values())
    plan = stage(c, MachineShape(5, 0, 0))
    assert plan.num_stages == 1 and plan.total_cost == 0


def test_six_h_gates():
    sh = MachineShape(3, 0, 3)
    assert solve_ilp(build_ilp(SIX_H, sh, 1)).status is SolveStatus.INFEASIBLE
    assert brute_staging(SIX_H, 3, 0, 3, 3.0) == (2, 12.0)
    plan = stage(SIX_H, sh)
    assert (plan.num_stages, plan.total_cost) == (2, 12.0)
    assert greedy_stage(SIX_H, sh).num_stages == 2


def test_ghz12_against_oracle():
    c = _attached(generate("ghz", 12))
    plan = stage(c, MachineShape(6, 2, 4))
    assert brute_staging(c, 6, 2, 4, 3.0, s_max=3) == (2, 18.0)
    assert (plan.num_stages, plan.total_cost) == (2, 18.0)
    assert greedy_stage(c, MachineShape(6, 2, 4)).num_stages >= plan.num_stages


def test_staging_cost_examples():
    sh = MachineShape(2, 1, 1)
    a = Stage((), (0, 1), (2,), (3,))
    assert staging_cost(StagingPlan([a], 0, sh)) == 0
    assert staging_cost(StagingPlan([a, a], 0, sh)) == 0
    sh5 = MachineShape(2, 2, 1)
    x = Stage((), (0, 1), (2, 3), (4,))
    y = Stage((), (3, 4), (0, 2), (1,))
    assert staging_cost(StagingPlan([x, y], 0, sh5)) == 2 + 3


def test_infeasible_shape():
    c = make_circuit(3, [("H", [0]), ("H", [1]), ("CCX", [0, 1, 2])])
    with pytest.raises(InfeasibleShape):
        build_ilp(_attached(c), MachineShape(2, 1, 0), 1)
    with pytest.raises(Stuck):
        greedy_stage(_attached(c), MachineShape(2, 1, 0))


def test_no_plan_within_limit():
    with pytest.raises(NoPlanWithinLimit):
        stage(SIX_H, MachineShape(3, 0, 3), s_max=1)
    with pytest.raises(ValueError):
        stage(SIX_H, MachineShape(3, 0, 3), s_max=0)


def test_budget_exceeded():
    c = _attached(generate("graphstate_ring", 10))
    with pytest.raises(BudgetExceeded):
        stage(c, MachineShape(3, 3, 4), budget_nodes=5)


def test_plan_json_round_trip():
    c = _attached(generate("qft", 6))
    plan = stage(c, MachineShape(3, 1, 2))
    data = json.loads(plan.dumps())
    assert set(data) == {"stages", "cost", "shape"}
    assert isinstance(data["cost"], int)
    back = StagingPlan.from_json(data)
    assert back.stages == plan.stages and back.total_cost == plan.total_cost


def test_lp_dump_mentions_every_variable():
    m = build_ilp(_attached(generate("qft", 4)), MachineShape(2, 1, 1), 2)
    text = to_lp(m)
    assert "\nMinimize\n" in text and text.endswith("End\n")
    for v in m.variables:
        assert v in text


def test_validate_staging_catches_problems():
    c = _attached(generate("ghz", 4))
    good = stage(c, MachineShape(2, 1, 1))
    assert validate_staging(good, c) == []
    bad = StagingPlan(list(reversed(good.stages)), 0, good.shape)
    if good.num_stages > 1:
        assert any("backwards" in p or "non-insular" in p for p in validate_staging(bad, c))
    short = StagingPlan(good.stages[:1] if good.num_stages > 1 else [], 0, good.shape)
    assert "stages do not cover every gate" in validate_staging(short, c)


def _check_solution(c, shape, plan):
    assert validate_staging(plan, c) == []
    assert staging_cost(plan) == plan.total_cost
    m = build_ilp(c, shape, plan.num_stages)
    res = solve_ilp(m)
    assert m.violations(res.values) == []
    assert m.objective_value(res.values) == res.objective == plan.total_cost


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1_000_000))
def test_matches_exhaustive_oracle(seed):
    rng = random.Random(seed)
    n = rng.randint(2, 7)
    c = _attached(random_circuit(rng, n, rng.randint(1, 14)))
    need = max((len(non_insular_set(g)) for g in c.gates), default=1)
    L = rng.randint(max(1, need), n)
    R = rng.randint(0, n - L)
    G = n - L - R
    cf = rng.choice([1.0, 1.5, 3.0])
    shape = MachineShape(L, R, G, cf)
    want = brute_staging(c, L, R, G, cf, s_max=6)
    if want is None:
        with pytest.raises(NoPlanWithinLimit):
            stage(c, shape, s_max=6)
        return
    plan = stage(c, shape, s_max=6)
    assert (plan.num_stages, plan.total_cost) == want
    _check_solution(c, shape, plan)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1_000_000))
def test_more_locals_never_needs_more_stages(seed):
    rng = random.Random(seed)
    n = rng.randint(3, 7)
    c = _attached(random_circuit(rng, n, rng.randint(1, 12)))
    need = max((len(non_insular_set(g)) for g in c.gates), default=1)
    counts = []
    for L in range(max(1, need), n + 1):
        counts.append(stage(c, MachineShape(L, 0, n - L)).num_stages)
    assert counts == sorted(counts, reverse=True)


@pytest.mark.parametrize("fam", ["ghz", "qft", "graphstate_ring"])
def test_corpus_ilp_not_worse_than_greedy(fam):
    for n in (6, 8, 10, 12, 14):
        c = _attached(generate(fam, n))
        for L, R, G in ((n - 2, 1, 1), (n - 4, 2, 2), (n // 2, n // 4, n - n // 2 - n // 4)):
            sh = MachineShape(L, R, G)
            plan = stage(c, sh)
            greedy = greedy_stage(c, sh)
            assert validate_staging(plan, c) == [] and validate_staging(greedy, c) == []
            assert plan.num_stages <= greedy.num_stages
            assert staging_cost(greedy) == greedy.total_cost

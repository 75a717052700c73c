import itertools
import math
from types import SimpleNamespace

import numpy as np
import pytest

from heterodispatch.assignment import fastest_idle, index_for
from heterodispatch.core import SystemParams
from heterodispatch.meanfield import analyze
from heterodispatch.optimizer import (Budget, Infeasible, OptimizationProblem, SEED_SLACK,
                                      jsq_class_response, optimize, optimize_fixed_rule,
                                      optimize_gen_seeded, optimize_src_jsq, project_simplex,
                                      src_jsq_objective)
from heterodispatch.querying import Br, Det, Gen, Sfc, Src, lower

BASE3 = SystemParams(3, 3, 0.6, (2.0, 0.8, 0.4), (1 / 3, 1 / 6, 1 / 2))
BASE2 = SystemParams(2, 4, 0.9, (25 / 21, 5 / 21), (4 / 5, 1 / 5))
SMALL = Budget(starts=1, iters=300)


def _homogeneous(s, d, lam):
    q = np.ones(s) / s
    mu = np.ones(s)
    return SimpleNamespace(s=s, d=d, lam=lam, mu=tuple(mu), q=tuple(q), mu_arr=mu, q_arr=q)


# -- simplex projection ----------------------------------------------------------

def test_project_simplex_properties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        v = rng.normal(size=rng.integers(1, 7)) * 3
        x = project_simplex(v)
        assert np.all(x >= 0) and x.sum() == pytest.approx(1.0, abs=1e-12)
        assert project_simplex(x) == pytest.approx(x, abs=1e-12)
        # optimality: v - x is constant on the support and no larger elsewhere
        g = v - x
        on = x > 1e-12
        assert np.ptp(g[on]) < 1e-9
        if np.any(~on):
            assert np.max(g[~on]) <= np.min(g[on]) + 1e-9


def test_project_simplex_known_point():
    assert project_simplex([0.0, 0.0, 2.0]) == pytest.approx([0.0, 0.0, 1.0])
    assert project_simplex([0.5, 0.5, 1.0]) == pytest.approx([1 / 6, 1 / 6, 2 / 3])
    assert project_simplex([1.0, 1.0]) == pytest.approx([0.5, 0.5])


# -- SRC + JSQ ------------------------------------------------------------------------

def test_jsq_tail_exponents_d2():
    x, mu = 0.6, 1.3
    manual = sum(x ** (2 ** m - 1) for m in range(1, 40)) / (x * mu)
    assert jsq_class_response(x, mu, 2) == pytest.approx(manual, rel=1e-13)


def test_jsq_d1_is_mm1():
    for x in (0.1, 0.5, 0.9):
        assert jsq_class_response(x, 2.0, 1) == pytest.approx(1 / (2.0 * (1 - x)), rel=1e-12)


def test_src_jsq_d1_per_class():
    p = BASE3.with_lambda(0.5)
    p1 = SystemParams(3, 1, 0.5, p.mu, p.q)
    phat = (0.6, 0.1, 0.3)
    expect = sum(phat[i] / (p.mu[i] - 0.5 * phat[i] / p.q[i]) for i in range(3))
    assert src_jsq_objective(p1, phat) == pytest.approx(expect, rel=1e-12)


def test_src_jsq_symmetric_classes():
    p = _homogeneous(3, 2, 0.7)
    base = (0.5, 0.3, 0.2)
    vals = {round(src_jsq_objective(p, perm), 12) for perm in itertools.permutations(base)}
    assert len(vals) == 1


def test_src_jsq_homogeneous_optimum_is_capacity_split():
    p = _homogeneous(3, 2, 0.8)
    best = src_jsq_objective(p, p.mu_arr * p.q_arr)
    grid = np.linspace(0.01, 0.98, 60)
    for a in grid:
        for b in grid:
            if a + b < 0.99:
                assert src_jsq_objective(p, (a, b, 1 - a - b)) >= best - 1e-12
    pol = optimize_src_jsq(p, Budget(2, 800))
    assert pol.objective == pytest.approx(best, abs=1e-8)
    assert pol.assignment_rule == "JSQ"


def test_src_jsq_infeasible_at_full_load():
    with pytest.raises(Infeasible):
        optimize_src_jsq(BASE3.with_lambda(1.0))


# -- CID families ----------------------------------------------------------------------

def test_sfc_picks_largest_capacity_class():
    pol = optimize(OptimizationProblem("SFC", BASE3.with_lambda(0.3)))
    assert pol.rule == Sfc(0)


def test_sfc_infeasible_beyond_best_class():
    with pytest.raises(Infeasible):
        optimize(OptimizationProblem("SFC", BASE3.with_lambda(0.7)))


def test_fixed_br_on_two_class_high_load():
    pol = optimize_fixed_rule(BASE2, Br(), SMALL)
    assert math.isfinite(pol.objective)
    assert pol.rule == Br()


@pytest.mark.parametrize("family", ["IID", "IND", "GEN", "SRC"])
def test_family_not_worse_than_canonical_start(family):
    ref = analyze(BASE3, Br(), fastest_idle(index_for(BASE3))).mean_T
    pol = optimize(OptimizationProblem(family, BASE3), budget=SMALL)
    assert pol.objective <= ref + 1e-12
    # the reported objective is reproducible from the returned policy
    again = analyze(BASE3, pol.rule, pol.assign).mean_T
    assert again == pytest.approx(pol.objective, abs=1e-8)


def test_optimize_is_deterministic():
    a = optimize(OptimizationProblem("IID", BASE3), budget=SMALL, rng_seed=4)
    b = optimize(OptimizationProblem("IID", BASE3), budget=SMALL, rng_seed=4)
    assert a.objective == b.objective
    assert np.array_equal(a.assign.values, b.assign.values)


def test_det_returns_single_mix():
    p = BASE2.with_lambda(0.5)
    pol = optimize(OptimizationProblem("DET", p), budget=Budget(0, 200))
    assert isinstance(pol.rule, Det)
    assert lower(pol.rule, p).p.max() == 1.0
    assert math.isfinite(pol.objective)


def test_seeded_gen_within_slack_of_ind():
    ind = optimize(OptimizationProblem("IND", BASE3), budget=SMALL)
    gen = optimize_gen_seeded(BASE3, SMALL, ind_policy=ind)
    assert gen.objective <= ind.objective + SEED_SLACK
    assert isinstance(gen.rule, Gen)
    assert gen.family == "GEN-SEEDED"


def test_seeded_gen_single_class_matches_gen():
    p = SystemParams(1, 2, 0.6, (1.0,), (1.0,))
    a = optimize_gen_seeded(p, SMALL)
    b = optimize(OptimizationProblem("GEN", p), budget=SMALL)
    assert a.objective == pytest.approx(b.objective, abs=1e-10)


def test_src_family_rule_type():
    pol = optimize(OptimizationProblem("SRC", BASE3), budget=SMALL)
    assert isinstance(pol.rule, Src)


def test_unknown_family():
    with pytest.raises(ValueError):
        optimize(OptimizationProblem("NOPE", BASE3))


@pytest.mark.parametrize("family", ["GEN", "IID", "IND", "SRC"])
def test_search_gradient_matches_finite_differences(family):
    from heterodispatch.optimizer import _Encoding, _Objective, _index
    rng = np.random.default_rng(0)
    p = BASE3.with_lambda(0.3)
    enc = _Encoding(family, p, _index(p))
    obj = _Objective(enc)
    base = enc.layout.project_all(enc.canonical_start())
    x = 0.8 * base + 0.2 * enc.random_start(rng)
    _, g, _ = obj.value_and_grad(x)
    assert g is not None
    d = 0.2 * (enc.random_start(rng) - x)      # a feasible direction
    h = 1e-6
    fp = obj.value_and_grad(x + h * d)[0]
    fm = obj.value_and_grad(x - h * d)[0]
    assert g @ d == pytest.approx((fp - fm) / (2 * h), rel=1e-6, abs=1e-8)


def test_ind_seeded_with_iid_within_slack():
    iid = optimize(OptimizationProblem("IID", BASE3), budget=SMALL)
    ind = optimize(OptimizationProblem("IND", BASE3), seed_policy=iid, budget=SMALL)
    assert ind.objective <= iid.objective + SEED_SLACK


def test_returned_policies_are_feasible():
    for family in ("GEN", "IND", "IID"):
        pol = optimize(OptimizationProblem(family, BASE3), budget=SMALL)
        p = lower(pol.rule, BASE3).p
        assert np.all(p >= -1e-10) and p.sum() == pytest.approx(1.0, abs=1e-10)
        assert np.all(pol.solution.lambda_busy < BASE3.mu_arr)

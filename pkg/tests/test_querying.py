import itertools
import math

import numpy as np
import pytest

from heterodispatch.core import SystemParams, enumerate_mixes
from heterodispatch.querying import (Br, Det, Gen, Iid, Ind, QueryDistribution, Sfc, Src,
                                     Uni, independent_pmf, lower, stability_region)

BASE3 = SystemParams(3, 3, 0.5, (2.0, 0.8, 0.4), (1 / 3, 1 / 6, 1 / 2))
BASE2 = SystemParams(2, 4, 0.5, (25 / 21, 5 / 21), (4 / 5, 1 / 5))


def _brute_slots(space, rows):
    """Enumerate all d-tuples of slot classes."""
    out = np.zeros(len(space))
    s = space.s
    for labels in itertools.product(range(s), repeat=space.d):
        w = math.prod(rows[u][c] for u, c in enumerate(labels))
        mix = tuple(labels.count(c) for c in range(s))
        out[space.index[mix]] += w
    return out


def test_iid_s2_d2_curve():
    p2 = SystemParams(2, 2, 0.5, (1.5, 0.5), (0.5, 0.5))
    x = 0.3
    p = lower(Iid((x, 1 - x)), p2).p
    assert p == pytest.approx([x * x, 2 * x * (1 - x), (1 - x) ** 2], abs=1e-15)


def test_br_two_class():
    assert BASE2.mu_arr * BASE2.q_arr == pytest.approx([20 / 21, 1 / 21])
    p = lower(Br(), BASE2)
    a = 20 / 21
    for mix in p.space:
        expect = math.comb(4, mix[0]) * a ** mix[0] * (1 - a) ** mix[1]
        assert p.prob(mix) == pytest.approx(expect, abs=1e-14)


def test_uni_binomial():
    p2 = SystemParams(2, 2, 0.5, (1.5, 0.5), (0.5, 0.5))
    assert lower(Uni(), p2).p == pytest.approx([0.25, 0.5, 0.25])


def test_ind_matches_slot_enumeration():
    rng = np.random.default_rng(3)
    for s, d in [(2, 3), (3, 3), (3, 4)]:
        space = enumerate_mixes(s, d)
        rows = rng.dirichlet(np.ones(s), size=d)
        mu = tuple(np.linspace(2, 1, s))
        q = np.ones(s) / s
        mu = tuple(np.array(mu) / float(np.dot(mu, q)))
        params = SystemParams(s, d, 0.5, mu, tuple(q))
        got = lower(Ind(tuple(map(tuple, rows))), params).p
        assert got == pytest.approx(_brute_slots(space, rows), abs=1e-14)


def test_ind_identical_rows_equals_iid():
    pt = (0.5, 0.3, 0.2)
    a = lower(Ind((pt,) * 3), BASE3).p
    b = lower(Iid(pt), BASE3).p
    assert a == pytest.approx(b, abs=1e-15)


def test_src_sfc_det_point_masses():
    src = lower(Src((0.2, 0.3, 0.5)), BASE3)
    assert src.as_dict() == pytest.approx({(3, 0, 0): 0.2, (0, 3, 0): 0.3, (0, 0, 3): 0.5})
    assert lower(Sfc(1), BASE3).as_dict() == {(0, 3, 0): 1.0}
    assert lower(Det((1, 1, 1)), BASE3).as_dict() == {(1, 1, 1): 1.0}


@pytest.mark.parametrize("rule", [Gen((0.5, 0.5)), Iid((1.2, -0.2, 0.0)),
                                  Det((2, 2, 0)), Sfc(5), Ind(((1, 0, 0),))])
def test_lower_rejects_bad_rules(rule):
    with pytest.raises(ValueError):
        lower(rule, BASE3)


def test_distribution_validation():
    space = enumerate_mixes(2, 2)
    with pytest.raises(ValueError):
        QueryDistribution(space, [0.5, 0.5, 0.5])
    with pytest.raises(ValueError):
        QueryDistribution(space, [0.5, 0.5])


def test_det_threshold_two_class():
    v = stability_region(Det((2, 2)), BASE2)
    assert v.threshold == pytest.approx(1.0, abs=1e-12)


def test_sfc_family_threshold_three_class():
    assert stability_region("SFC", BASE3).threshold == pytest.approx(2 / 3)
    assert stability_region(Sfc(2), BASE3).threshold == pytest.approx(0.2)


def test_uni_single_class():
    for lam, stable in [(0.9, None), (1.1, False)]:
        p = SystemParams(1, 2, lam, (1.0,), (1.0,))
        assert stability_region(Uni(), p).stable(lam) is stable


def test_family_thresholds():
    for fam in ("SRC", "IID", "IND", "GEN", "BR", "DET"):
        assert stability_region(fam, BASE3).threshold == 1.0
    assert stability_region(Gen(tuple(lower(Br(), BASE3).p)), BASE3).threshold is None

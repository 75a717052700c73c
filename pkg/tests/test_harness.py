import math
import statistics

import pytest

from heterodispatch import harness
from heterodispatch.assignment import random_assignment, index_for
from heterodispatch.core import SystemParams
from heterodispatch.meanfield import analyze
from heterodispatch.optimizer import Budget, OptimizationProblem, optimize
from heterodispatch.querying import Br, Det, Gen, Iid, Ind, Sfc, Src, Uni

TINY = Budget(starts=0, iters=150)


def test_setting_counts():
    settings = harness.generate_settings("coarse")
    assert len(settings) == 12825
    by_s = {s: sum(1 for x in settings if x.s == s) for s in (2, 3, 4)}
    assert by_s == {2: 1425, 3: 5700, 4: 5700}
    assert len(harness.generate_settings("fine")) == 12825 // 19 * 49


def test_configuration_choices():
    assert [len(harness.speed_ratio_choices(s)) for s in (2, 3, 4)] == [5, 10, 10]
    assert [len(harness.share_choices(s)) for s in (2, 3, 4)] == [5, 10, 10]
    shares = harness.share_choices(3)
    assert shares == sorted(shares, reverse=True)
    assert all(sum(x) == 6 and min(x) >= 1 for x in shares)


def test_three_class_setting_derivation():
    st = harness.ParameterSetting(0, 3, 3, 0.5, (5.0, 2.0), (2, 1, 3))
    assert st.q == pytest.approx((1 / 3, 1 / 6, 1 / 2))
    assert st.mu == pytest.approx((2.0, 0.8, 0.4), abs=1e-12)


def test_settings_are_pure_and_valid():
    a = harness.generate_settings()
    b = harness.generate_settings()
    assert a == b
    assert [x.setting_id for x in a] == list(range(len(a)))
    for st in a[::37]:
        p = st.params()
        assert sum(m * q for m, q in zip(p.mu, p.q)) == pytest.approx(1.0, abs=1e-12)


def test_lambda_grids():
    assert harness.lambda_grid("coarse")[0] == 0.05 and harness.lambda_grid("coarse")[-1] == 0.95
    assert len(harness.lambda_grid("fine")) == 49
    with pytest.raises(ValueError):
        harness.lambda_grid("medium")


def _fake_rows():
    st = harness.ParameterSetting(3, 2, 2, 0.5, (2.0,), (3, 3))
    return [harness.make_row(st, "IID", 1.5, 0.25, True, 0),
            harness.make_row(st, "IID", 2.5, 0.75, True, 0),
            harness.make_row(st, "IID", math.nan, 9.0, False, 0),
            harness.make_row(st, "SRC", 3.0, 0.5, True, 0)]


def test_aggregate_excludes_infeasible():
    agg = harness.aggregate(_fake_rows())
    assert agg["IID"]["mean_e_t"] == pytest.approx(2.0)
    assert agg["IID"]["median_e_t"] == pytest.approx(2.0)
    assert agg["IID"]["n_feasible"] == 2
    # runtime statistics include the failed record
    assert agg["IID"]["mean_runtime_s"] == pytest.approx(statistics.fmean([0.25, 0.75, 9.0]))
    assert agg["SRC"]["n"] == 1


def test_csv_roundtrip_is_byte_identical(tmp_path):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    harness.write_sweep(_fake_rows(), a)
    harness.write_sweep(harness.read_sweep(a), b)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().startswith("#schema_version=")


def test_sweep_resume_and_determinism(tmp_path):
    settings = harness.generate_settings()[:2]
    out = tmp_path / "sweep.csv"
    harness.run_sweep(settings, ["SRC", "BR"], TINY, out, parallelism=1)
    rows = harness.read_sweep(out)
    assert [(r["setting_id"], r["family"]) for r in rows] == [
        ("0", "SRC"), ("0", "BR"), ("1", "SRC"), ("1", "BR")]
    size = out.stat().st_size
    harness.run_sweep(settings, ["SRC", "BR"], TINY, out, parallelism=1)
    assert out.stat().st_size == size          # nothing left to do
    other = tmp_path / "again.csv"
    harness.run_sweep(settings, ["SRC", "BR"], TINY, other, parallelism=2)
    strip = lambda rs: [{k: v for k, v in r.items() if k != "runtime_s"} for r in rs]
    assert strip(harness.read_sweep(other)) == strip(rows)


def test_sweep_records_failures(tmp_path):
    st = [s for s in harness.generate_settings() if s.lam == 0.95 and s.s == 3][0]
    out = tmp_path / "f.csv"
    harness.run_sweep([st], ["SFC"], TINY, out, parallelism=1)
    (row,) = harness.read_sweep(out)
    assert row["feasible"] == "false" and row["e_t"] == ""


def test_sweep_rejects_unknown_family(tmp_path):
    with pytest.raises(ValueError):
        harness.run_sweep([], ["MAGIC"], TINY, tmp_path / "x.csv")


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("HETERODISPATCH_THREADS", "2")
    assert harness.thread_cap(8) == 2
    monkeypatch.delenv("HETERODISPATCH_THREADS")
    assert harness.thread_cap(3) == 3


@pytest.mark.parametrize("rule", [Gen((0.2, 0.3, 0.5)), Iid((0.6, 0.4)),
                                  Ind(((0.6, 0.4), (0.1, 0.9))), Det((1, 1)), Src((0.3, 0.7)),
                                  Sfc(1), Uni(), Br()])
def test_rule_roundtrip(rule):
    assert harness.rule_from_dict(harness.rule_to_dict(rule)) == rule


def test_policy_file_roundtrip(tmp_path):
    p = SystemParams(3, 3, 0.6, (2.0, 0.8, 0.4), (1 / 3, 1 / 6, 1 / 2))
    pol = optimize(OptimizationProblem("IID", p), budget=Budget(0, 200))
    path = tmp_path / "pol.json"
    harness.save_policy(path, pol, p, rng_seed=0)
    loaded = harness.load_policy(path)
    assert loaded.params == p
    assert loaded.rule == pol.rule
    assert loaded.assign.values.tolist() == pol.assign.values.tolist()
    again = analyze(loaded.params, loaded.rule, loaded.assign).mean_T
    assert again == pytest.approx(pol.objective, abs=1e-8)


def test_policy_without_alpha_defaults_to_fastest_idle():
    doc = {"params": {"s": 1, "d": 1, "lambda": 0.5, "mu": [1], "q": [1]},
           "rule": {"type": "UNI"}}
    pf = harness.policy_from_dict(doc)
    assert analyze(pf.params, pf.rule, pf.assign).mean_T == pytest.approx(2.0)


def test_smoke_sweep_src_dominated(tmp_path):
    settings = harness.sample_settings(harness.generate_settings(), 20, rng_seed=1)
    out = tmp_path / "smoke.csv"
    harness.run_sweep(settings, ["IID", "SRC", "BR", "GEN-SEEDED"], Budget(1, 250), out)
    rows = harness.read_sweep(out)
    by = {}
    for r in rows:
        by.setdefault(r["setting_id"], {})[r["family"]] = r
    ok = total = 0
    for fams in by.values():
        if fams["SRC"]["feasible"] == "true" and fams["GEN-SEEDED"]["feasible"] == "true":
            total += 1
            ok += float(fams["SRC"]["e_t"]) >= float(fams["GEN-SEEDED"]["e_t"]) - 1e-12
    assert total >= 16
    assert ok >= 0.8 * total

"""Parameter settings, sweeps over policy families, aggregation and policy files."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .assignment import CidAssignment, fastest_idle, index_for
from .core import SystemParams, _compositions, normalized_params
from .meanfield import InstabilityDetected, NonConvergence
from .optimizer import (Budget, BudgetExhausted, Infeasible, OptimizationProblem,
                        OptimizedPolicy, optimize, optimize_fixed_rule,
                        optimize_gen_seeded, optimize_src_jsq)
from .querying import Br, Det, Gen, Iid, Ind, Sfc, Src, Uni

__version__ = "0.1.0"
SCHEMA_VERSION = 1
SPEED_RATIOS = (1.25, 1.5, 2.0, 3.0, 5.0)
TOTAL_SHARES = 6
SWEEP_FAMILIES = ("GEN", "IND", "IID", "DET", "SRC", "SFC", "BR", "UNI",
                  "GEN-SEEDED", "SRC-JSQ")

# ---------------------------------------------------------------------------
# Parameter settings
# ---------------------------------------------------------------------------


def lambda_grid(grid: str = "coarse") -> List[float]:
    if grid == "coarse":
        return [round(0.05 * n, 10) for n in range(1, 20)]
    if grid == "fine":
        return [round(0.02 * n, 10) for n in range(1, 50)]
    raise ValueError(f"unknown lambda grid {grid!r}")


@dataclass(frozen=True)
class ParameterSetting:
    setting_id: int
    s: int
    d: int
    lam: float
    R: tuple          # s-1 speed ratios to the slowest class, decreasing
    shares: tuple     # s positive integers summing to 6

    @property
    def q(self) -> tuple:
        return tuple(x / TOTAL_SHARES for x in self.shares)

    @property
    def mu(self) -> tuple:
        return self.params().mu

    def params(self) -> SystemParams:
        return normalized_params(self.s, self.d, self.lam, tuple(self.R) + (1.0,), self.q)


def speed_ratio_choices(s: int) -> List[tuple]:
    """(s-1)-subsets of the speed-ratio menu, each sorted in decreasing order."""
    return [tuple(sorted(c, reverse=True))
            for c in itertools.combinations(SPEED_RATIOS, s - 1)]


def share_choices(s: int) -> List[tuple]:
    """Compositions of 6 into s positive parts, reverse-lexicographic."""
    comps = [tuple(x + 1 for x in c) for c in _compositions(TOTAL_SHARES - s, s)]
    return sorted(comps, reverse=True)


def generate_settings(grid: str = "coarse", s_values=(2, 3, 4),
                      d_values=(2, 3, 4)) -> List[ParameterSetting]:
    lams = lambda_grid(grid)
    out = []
    for s in s_values:
        for d in d_values:
            for R in speed_ratio_choices(s):
                for shares in share_choices(s):
                    for lam in lams:
                        out.append(ParameterSetting(len(out), s, d, lam, R, shares))
    return out


def sample_settings(settings: Sequence[ParameterSetting], n: int, rng_seed: int = 0):
    rng = np.random.Generator(np.random.Philox(rng_seed))
    pick = sorted(rng.choice(len(settings), size=min(n, len(settings)), replace=False))
    return [settings[int(i)] for i in pick]


# ---------------------------------------------------------------------------
# Running one family
# ---------------------------------------------------------------------------

def solve_family(family: str, params: SystemParams, budget: Budget = Budget(),
                 rng_seed: int = 0) -> OptimizedPolicy:
    fam = family.upper()
    if fam == "GEN-SEEDED":
        return optimize_gen_seeded(params, budget, rng_seed)
    if fam == "SRC-JSQ":
        return optimize_src_jsq(params, budget, rng_seed)
    if fam in ("BR", "UNI"):
        rule = Br() if fam == "BR" else Uni()
        pol = optimize_fixed_rule(params, rule, budget, rng_seed)
        pol.family = fam
        return pol
    if fam in ("GEN", "IND", "IID", "DET", "SRC", "SFC"):
        return optimize(OptimizationProblem(fam, params), budget=budget, rng_seed=rng_seed)
    raise ValueError(f"unknown family {family!r}")


FAILURES = (Infeasible, InstabilityDetected, NonConvergence, BudgetExhausted)


def _run_record(args):
    setting, family, budget, seed = args
    t0 = time.perf_counter()
    try:
        pol = solve_family(family, setting.params(), budget, seed)
        e_t, ok = pol.objective, math.isfinite(pol.objective)
    except FAILURES:
        e_t, ok = math.nan, False
    return setting, family, e_t, time.perf_counter() - t0, ok, seed


# ---------------------------------------------------------------------------
# Sweep files
# ---------------------------------------------------------------------------

def csv_columns(s_max: int = 4) -> List[str]:
    return (["setting_id", "s", "d", "lambda"]
            + [f"R{i + 1}" for i in range(s_max - 1)]
            + [f"share{i + 1}" for i in range(s_max)]
            + ["family", "e_t", "runtime_s", "feasible", "seed"])


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def make_row(setting: ParameterSetting, family: str, e_t: float, runtime: float,
             feasible: bool, seed: int, s_max: int = 4) -> Dict[str, str]:
    row = {"setting_id": str(setting.setting_id), "s": str(setting.s),
           "d": str(setting.d), "lambda": repr(float(setting.lam))}
    for i in range(s_max - 1):
        row[f"R{i + 1}"] = repr(float(setting.R[i])) if i < len(setting.R) else ""
    for i in range(s_max):
        row[f"share{i + 1}"] = str(setting.shares[i]) if i < len(setting.shares) else ""
    row.update(family=family, e_t=_fmt(e_t) if feasible else "",
               runtime_s=f"{runtime:.6f}", feasible="true" if feasible else "false",
               seed=str(seed))
    return row


def read_sweep(path) -> List[Dict[str, str]]:
    path = Path(path)
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(io.StringIO("".join(lines))))


def write_sweep(rows: Iterable[Dict[str, str]], path, s_max: int = 4) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"#schema_version={SCHEMA_VERSION}\n")
        w = csv.DictWriter(fh, fieldnames=csv_columns(s_max), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def thread_cap(requested: Optional[int] = None) -> int:
    env = os.environ.get("HETERODISPATCH_THREADS")
    n = requested if requested is not None else (os.cpu_count() or 1)
    if env:
        n = min(n, max(1, int(env)))
    return max(1, n)


def run_sweep(settings: Sequence[ParameterSetting], families: Sequence[str],
              budget: Budget, out, parallelism: Optional[int] = None,
              rng_seed: int = 0) -> Path:
    """Append one row per (setting, family) to the CSV at ``out``.

    Rows already present are skipped, so an interrupted sweep can be resumed.
    Rows are written in (setting, family) order regardless of parallelism.
    """
    out = Path(out)
    fams = [f.upper() for f in families]
    for f in fams:
        if f not in SWEEP_FAMILIES:
            raise ValueError(f"unknown family {f!r}")
    done = {(r["setting_id"], r["family"]) for r in read_sweep(out)}
    todo = [(st, f, budget, rng_seed) for st in settings for f in fams
            if (str(st.setting_id), f) not in done]
    if not out.exists():
        write_sweep([], out)
    workers = thread_cap(parallelism)
    with out.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=csv_columns(), lineterminator="\n")

        def emit(res):
            w.writerow(make_row(*res))
            fh.flush()

        if workers == 1 or len(todo) <= 1:
            for job in todo:
                emit(_run_record(job))
        else:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                for res in ex.map(_run_record, todo):
                    emit(res)
    return out


def aggregate(rows: Iterable[Dict[str, str]]) -> Dict[str, dict]:
    """Per-family mean/median E[T] over feasible rows and runtime over all rows."""
    groups: Dict[str, list] = {}
    for r in rows:
        groups.setdefault(r["family"], []).append(r)
    out = {}
    for fam, rs in groups.items():
        et = [float(r["e_t"]) for r in rs if r["feasible"] == "true"]
        rt = [float(r["runtime_s"]) for r in rs]
        out[fam] = {"n": len(rs), "n_feasible": len(et),
                    "mean_e_t": statistics.fmean(et) if et else math.nan,
                    "median_e_t": statistics.median(et) if et else math.nan,
                    "mean_runtime_s": statistics.fmean(rt) if rt else math.nan,
                    "median_runtime_s": statistics.median(rt) if rt else math.nan}
    return out


# ---------------------------------------------------------------------------
# Policy files
# ---------------------------------------------------------------------------

def rule_to_dict(rule) -> dict:
    if rule is None:
        return None
    if isinstance(rule, Gen):
        return {"type": "GEN", "p": list(map(float, rule.p))}
    if isinstance(rule, Iid):
        return {"type": "IID", "ptilde": list(map(float, rule.ptilde))}
    if isinstance(rule, Ind):
        return {"type": "IND", "ptilde_u": [list(map(float, r)) for r in rule.ptilde_u]}
    if isinstance(rule, Det):
        return {"type": "DET", "mix": list(map(int, rule.mix))}
    if isinstance(rule, Src):
        return {"type": "SRC", "phat": list(map(float, rule.phat))}
    if isinstance(rule, Sfc):
        return {"type": "SFC", "cls": int(rule.cls)}
    if isinstance(rule, Uni):
        return {"type": "UNI"}
    if isinstance(rule, Br):
        return {"type": "BR"}
    raise TypeError(f"cannot serialize rule {rule!r}")


def rule_from_dict(data: dict):
    kind = data["type"].upper()
    if kind == "GEN":
        return Gen(tuple(float(x) for x in data["p"]))
    if kind == "IID":
        return Iid(tuple(float(x) for x in data["ptilde"]))
    if kind == "IND":
        return Ind(tuple(tuple(float(x) for x in r) for r in data["ptilde_u"]))
    if kind == "DET":
        return Det(tuple(int(x) for x in data["mix"]))
    if kind == "SRC":
        return Src(tuple(float(x) for x in data["phat"]))
    if kind == "SFC":
        return Sfc(int(data["cls"]))
    if kind == "UNI":
        return Uni()
    if kind == "BR":
        return Br()
    raise ValueError(f"unknown rule type {data['type']!r}")


@dataclass
class PolicyFile:
    params: SystemParams
    rule: object
    assign: Optional[CidAssignment]
    assignment_rule: str = "CID"
    objective: Optional[float] = None
    family: Optional[str] = None
    provenance: dict = None


def policy_to_dict(params: SystemParams, rule, assign: Optional[CidAssignment],
                   assignment_rule: str = "CID", objective=None, family=None,
                   rng_seed=None) -> dict:
    alpha = None
    if assign is not None:
        alpha = [{"i": i, "j": j, "key": list(key), "value": float(v)}
                 for (i, j, key), v in zip(assign.index.T, assign.values) if v != 0.0]
    return {"params": params.to_dict(), "family": family, "rule": rule_to_dict(rule),
            "assignment": assignment_rule,
            "gamma": assign.index.variant if assign is not None else None,
            "alpha": alpha, "objective": objective,
            "provenance": {"tool": "heterodispatch", "version": __version__,
                           "rng_seed": rng_seed}}


def policy_from_dict(data: dict) -> PolicyFile:
    params = SystemParams.from_dict(data["params"])
    rule = rule_from_dict(data["rule"]) if data.get("rule") else None
    arule = (data.get("assignment") or "CID").upper()
    assign = None
    if arule == "CID":
        index = index_for(params, data.get("gamma") or "compact")
        if data.get("alpha") is None:
            assign = fastest_idle(index)
        else:
            alpha = {(int(e["i"]), int(e["j"]), tuple(int(x) for x in e["key"])): float(e["value"])
                     for e in data["alpha"]}
            assign = CidAssignment.from_mapping(index, alpha)
    return PolicyFile(params, rule, assign, arule, data.get("objective"),
                      data.get("family"), data.get("provenance") or {})


def save_policy(path, policy: OptimizedPolicy, params: SystemParams, rng_seed=None) -> None:
    doc = policy_to_dict(params, policy.rule, policy.assign, policy.assignment_rule,
                         policy.objective, policy.family, rng_seed)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_policy(path) -> PolicyFile:
    return policy_from_dict(json.loads(Path(path).read_text()))

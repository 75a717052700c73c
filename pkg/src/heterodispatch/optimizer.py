"""Joint optimization of querying and CID assignment parameters.

The decision vector only holds querying/assignment probabilities; the rates
are obtained by solving the fixed point inside the objective.  Every
probability block lives on a simplex: the local search works on an
unconstrained vector and projects each block before evaluating.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize as sopt

from .assignment import CidAssignment, fastest_idle
from .core import (IndexSets, SystemParams, build_index_sets, enumerate_mixes,
                   mix_pairs)
from .meanfield import (InstabilityDetected, NonConvergence, RateKernel,
                        objective_gradient, solve_kernel)
from .querying import (Det, Gen, Ind, Iid, QueryDistribution, Sfc, Src, Br,
                       independent_pmf, lower, stability_region)

PENALTY = 1e6
MARGIN = 1e-6
SEED_SLACK = 1e-3


class Infeasible(RuntimeError):
    pass


class BudgetExhausted(RuntimeError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class Budget:
    starts: int = 16
    iters: int = 300        # projected-gradient iterations per start


@dataclass(frozen=True)
class OptimizationProblem:
    family: str                     # GEN IID IND DET SRC SFC QR
    params: SystemParams
    pdist: Optional[QueryDistribution] = None   # for QR
    mixes: Optional[Tuple[tuple, ...]] = None   # restrict DET subproblems


@dataclass
class OptimizedPolicy:
    family: str
    rule: object
    assign: Optional[CidAssignment]
    objective: float
    solution: object = None
    solver_report: dict = field(default_factory=dict)
    assignment_rule: str = "CID"


# ---------------------------------------------------------------------------
# simplex helpers
# ---------------------------------------------------------------------------

def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum x = 1}."""
    v = np.asarray(v, dtype=float)
    n = v.size
    if n == 1:
        return np.ones(1)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, n + 1)
    cond = u - css / k > 0
    r = k[cond][-1]
    theta = css[r - 1] / r
    return np.maximum(v - theta, 0.0)


class BlockLayout:
    def __init__(self, sizes: Sequence[int]):
        self.sizes = list(sizes)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self.n = int(self.offsets[-1])

    def split(self, x) -> List[np.ndarray]:
        return [x[a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]

    def project(self, x) -> Tuple[List[np.ndarray], float]:
        blocks, drift = [], 0.0
        for raw in self.split(x):
            pb = project_simplex(raw)
            drift += float(np.sum((raw - pb) ** 2))
            blocks.append(pb)
        return blocks, drift

    def project_all(self, x) -> np.ndarray:
        return self.join(self.project(x)[0])

    def join(self, blocks) -> np.ndarray:
        if not blocks:
            return np.zeros(0)
        return np.concatenate([np.asarray(b, dtype=float) for b in blocks])


# ---------------------------------------------------------------------------
# family encodings
# ---------------------------------------------------------------------------

class _Encoding:
    """Maps simplex blocks to (rule, distribution, assignment)."""

    def __init__(self, family, params: SystemParams, index: IndexSets,
                 pdist: Optional[QueryDistribution] = None, mix=None):
        self.family = family
        self.params = params
        self.index = index
        self.space = index.space
        self.fixed_pdist = pdist
        self.mix = mix
        s, d = params.s, params.d
        base = fastest_idle(index)
        self.base_alpha = base.values.copy()
        # which alpha rows are free
        if family == "DET":
            wanted = {index.pair_of_mix_j(j, mix) for j in mix_pairs(mix)}
        elif family == "QR":
            live = [m for m, pr in zip(self.space.mixes, pdist.p) if pr > 0]
            wanted = {index.pair_of_mix_j(j, m) for m in live for j in mix_pairs(m)}
        elif family == "SRC":
            wanted = set()
        else:
            wanted = set(index.P)
        self.alpha_pairs = [pr for pr in index.P
                            if pr in wanted and len(index.members[pr]) > 1]
        q_sizes = {"GEN": [len(self.space)], "IID": [s], "IND": [s] * d,
                   "SRC": [s]}.get(family, [])
        self.n_query_blocks = len(q_sizes)
        self.layout = BlockLayout(q_sizes + [len(index.members[pr]) for pr in self.alpha_pairs])

    def assignment(self, alpha_blocks) -> CidAssignment:
        vals = self.base_alpha.copy()
        for pr, blk in zip(self.alpha_pairs, alpha_blocks):
            for i, v in zip(self.index.members[pr], blk):
                vals[self.index.t_index[(i,) + pr]] = v
        return CidAssignment(self.index, vals)

    def decode(self, blocks):
        qb = blocks[:self.n_query_blocks]
        ab = blocks[self.n_query_blocks:]
        f = self.family
        if f == "GEN":
            rule = Gen(tuple(qb[0]))
        elif f == "IID":
            rule = Iid(tuple(qb[0]))
        elif f == "IND":
            rule = Ind(tuple(tuple(r) for r in qb))
        elif f == "SRC":
            rule = Src(tuple(qb[0]))
        elif f == "DET":
            rule = Det(tuple(self.mix))
        else:
            rule = None
        if f == "QR":
            pdist = self.fixed_pdist
        else:
            pdist = lower(rule, self.params, self.space)
        return rule, pdist, self.assignment(ab)

    def block_grad(self, blocks, g_p, g_v) -> List[np.ndarray]:
        """Chain rule from (mix probabilities, table values) to the blocks."""
        f = self.family
        qb = blocks[:self.n_query_blocks]
        out = []
        if f == "GEN":
            out.append(np.asarray(g_p, dtype=float))
        elif f == "IID":
            out.append(self._iid_jac(qb[0]).T @ g_p)
        elif f == "IND":
            out.extend(self._ind_grad(qb, g_p))
        elif f == "SRC":
            out.append(np.asarray(g_p)[self._pure])
        for pr in self.alpha_pairs:
            out.append(np.array([g_v[self.index.t_index[(i,) + pr]]
                                 for i in self.index.members[pr]]))
        return out

    def _iid_jac(self, pt) -> np.ndarray:
        D = self.space.counts
        s = self.params.s
        coef = np.array([math.factorial(self.space.d) /
                         math.prod(math.factorial(int(c)) for c in m) for m in D])
        pt = np.asarray(pt, dtype=float)
        jac = np.zeros((len(D), s))
        for i in range(s):
            lower_pow = np.maximum(D[:, i] - 1, 0)
            others = np.prod(np.where(np.arange(s)[None, :] == i, 1.0, pt[None, :] ** D), axis=1)
            jac[:, i] = coef * D[:, i] * pt[i] ** lower_pow * others
        return jac

    def _ind_grad(self, rows, g_p) -> List[np.ndarray]:
        s, d = self.params.s, self.params.d
        small = enumerate_mixes(s, d - 1) if d > 1 else None
        out = []
        for u in range(d):
            rest = [r for k, r in enumerate(rows) if k != u]
            pm = independent_pmf(small, rest) if small is not None else np.ones(1)
            grad = np.zeros(s)
            for n, mix in enumerate(self.space.mixes):
                for i in range(s):
                    if mix[i] > 0:
                        m2 = mix[:i] + (mix[i] - 1,) + mix[i + 1:]
                        grad[i] += g_p[n] * (pm[small.index[m2]] if small is not None else 1.0)
            out.append(grad)
        return out

    @property
    def _pure(self):
        d, s = self.params.d, self.params.s
        return [self.space.index[tuple(d if l == i else 0 for l in range(s))] for i in range(s)]

    def encode_policy(self, rule, assign: Optional[CidAssignment]) -> np.ndarray:
        """Inverse of ``decode`` for a policy of this (or a smaller) family."""
        s, d = self.params.s, self.params.d
        f = self.family
        blocks = []
        if f == "GEN":
            blocks.append(lower(rule, self.params, self.space).p)
        elif f == "IID":
            blocks.append(np.asarray(_as_ptilde(rule, self.params)))
        elif f == "IND":
            if isinstance(rule, Ind):
                blocks.extend(np.asarray(r, dtype=float) for r in rule.ptilde_u)
            else:
                pt = _as_ptilde(rule, self.params)
                blocks.extend([np.asarray(pt)] * d)
        elif f == "SRC":
            blocks.append(np.asarray(rule.phat, dtype=float))
        for pr in self.alpha_pairs:
            members = self.index.members[pr]
            if assign is None:
                blk = [self.base_alpha[self.index.t_index[(i,) + pr]] for i in members]
            else:
                blk = [assign.get(i, pr[0], pr[1]) for i in members]
            blocks.append(np.asarray(blk, dtype=float))
        return self.layout.join(blocks)

    def canonical_start(self) -> np.ndarray:
        cap = self.params.mu_arr * self.params.q_arr
        f = self.family
        if f in ("GEN", "IID", "IND"):
            rule = Iid(tuple(cap))
        elif f == "SRC":
            rule = Src(tuple(cap))
        elif f == "DET":
            rule = Det(tuple(self.mix))
        else:
            rule = None
        return self.encode_policy(rule, None)

    def random_start(self, rng) -> np.ndarray:
        return self.layout.join([rng.dirichlet(np.ones(n)) for n in self.layout.sizes])


def _as_ptilde(rule, params):
    if isinstance(rule, Iid):
        return rule.ptilde
    if isinstance(rule, Br):
        return tuple(params.mu_arr * params.q_arr)
    raise TypeError(f"cannot express {rule!r} with one slot distribution")


class _Objective:
    """Fixed-point objective and its gradient over the simplex blocks."""

    def __init__(self, enc: _Encoding, cap: Optional[float] = None):
        self.enc = enc
        self.rho = None
        self.cap = cap
        self.nfev = 0
        self.kernel = None

    def evaluate(self, blocks, rho0=None):
        rule, pdist, assign = self.enc.decode(blocks)
        kernel = RateKernel(self.enc.params, pdist, assign)
        sol = solve_kernel(kernel, rho0=rho0, newton_first=rho0 is not None)
        self.kernel = kernel
        return rule, pdist, assign, sol

    def value_and_grad(self, x, rho0=None):
        """``(E[T], gradient, solution)``; ``(inf, None, None)`` if unusable."""
        self.nfev += 1
        blocks = self.enc.layout.split(x)
        try:
            _, pdist, assign, sol = self.evaluate(blocks, rho0)
        except (InstabilityDetected, NonConvergence):
            return math.inf, None, None
        mu = self.enc.params.mu_arr
        if np.any(sol.lambda_busy >= mu * (1 - MARGIN)) or not math.isfinite(sol.mean_T):
            return math.inf, None, None
        g_p, g_v = objective_gradient(self.enc.params, pdist, assign, sol, kernel=self.kernel)
        grad = self.enc.layout.join(self.enc.block_grad(blocks, g_p, g_v))
        return sol.mean_T, grad, sol


def _restore(obj: _Objective, x0, anchor):
    """Move an unstable start toward the anchor point until it is usable."""
    for t in (0.0, 0.25, 0.5, 0.75, 0.9, 1.0):
        x = (1 - t) * x0 + t * anchor
        f, g, sol = obj.value_and_grad(x)
        if g is not None:
            return x, f, g, sol
    return x0, math.inf, None, None


def _spg(obj: _Objective, x0, anchor, max_iter: int, tol: float = 1e-9):
    """Spectral projected gradient with Armijo backtracking on the blocks.

    Returns ``(x, f, sol, iterations, hit_limit)``.  Every accepted iterate
    is a stable policy, and ``f`` never increases.
    """
    project = obj.enc.layout.project_all
    x, f, g, sol = _restore(obj, project(x0), anchor)
    if g is None:
        return x, math.inf, None, 0, False
    step = 1.0 / max(float(np.max(np.abs(g))), 1e-12)
    flat = 0
    it = 0
    for it in range(1, max_iter + 1):
        d = project(x - step * g) - x
        if float(np.max(np.abs(d))) < tol:
            # also test a unit step so a tiny spectral step does not stop us early
            d = project(x - g) - x
            if float(np.max(np.abs(d))) < tol:
                return x, f, sol, it, False
        slope = float(g @ d)
        t = 1.0
        while True:
            xn = project(x + t * d)      # removes rounding drift off the simplex
            fn, gn, soln = obj.value_and_grad(xn, rho0=sol.rho)
            if gn is not None and fn <= f + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-10:
                return x, f, sol, it, False
        sv = xn - x
        yv = gn - g
        sy = float(sv @ yv)
        step = float(np.clip(sv @ sv / sy, 1e-8, 1e6)) if sy > 1e-18 else 1e3 * step
        step = min(step, 1e6)
        flat = flat + 1 if f - fn < 1e-13 * (1 + abs(f)) else 0
        x, f, g, sol = xn, fn, gn, soln
        if flat >= 5:
            return x, f, sol, it, False
    return x, f, sol, it, True


def _local_search(enc: _Encoding, starts: List[np.ndarray], budget: Budget,
                  cap: Optional[float] = None):
    results = []
    anchor = enc.layout.project_all(enc.canonical_start())
    for k, x0 in enumerate(starts):
        obj = _Objective(enc, cap)
        if enc.layout.n == 0:
            try:
                rule, _, assign, sol = obj.evaluate([])
            except (InstabilityDetected, NonConvergence):
                continue
            nfev, exhausted = 1, False
        else:
            x, f, sol, its, exhausted = _spg(obj, x0, anchor, budget.iters)
            if sol is None:
                continue
            rule, _, assign, sol = obj.evaluate(enc.layout.split(x), rho0=sol.rho)
            nfev = obj.nfev
        mu = enc.params.mu_arr
        if np.any(sol.lambda_busy >= mu * (1 - MARGIN)):
            continue
        if cap is not None and sol.mean_T > cap:
            continue
        results.append((sol.mean_T, k, rule, assign, sol, nfev, exhausted))
    return results


def _run(enc: _Encoding, family: str, budget: Budget, rng_seed: int,
         seed_x: Optional[np.ndarray] = None, cap: Optional[float] = None,
         include_canonical: bool = True) -> OptimizedPolicy:
    t0 = time.perf_counter()
    rng = np.random.Generator(np.random.Philox(rng_seed))
    starts = []
    labels = []
    if seed_x is not None:
        starts.append(seed_x)
        labels.append("seed")
    if include_canonical:
        starts.append(enc.canonical_start())
        labels.append("canonical")
    for k in range(budget.starts):
        starts.append(enc.random_start(rng))
        labels.append(f"dirichlet-{k}")
    if enc.layout.n == 0:
        starts = starts[:1]
        labels = labels[:1]
    results = _local_search(enc, starts, budget, cap)
    runtime = time.perf_counter() - t0
    if not results:
        raise Infeasible(f"no feasible {family} policy found")
    # lowest objective wins; ties go to the lowest start index
    results.sort(key=lambda r: (r[0], r[1]))
    obj, k, rule, assign, sol, nfev, exhausted = results[0]
    report = {"starts": len(starts), "feasible_starts": len(results),
              "best_start": labels[k], "runtime": runtime, "feasible": True,
              "nfev": nfev, "budget_exhausted": bool(exhausted), "rng_seed": rng_seed}
    return OptimizedPolicy(family, rule, assign, float(obj), sol, report)


def _index(params):
    return build_index_sets(enumerate_mixes(params.s, params.d))


def optimize(problem: OptimizationProblem, seed_policy: Optional[OptimizedPolicy] = None,
             budget: Budget = Budget(), rng_seed: int = 0,
             objective_cap: Optional[float] = None) -> OptimizedPolicy:
    """Local multi-start optimization of one family under CID assignment."""
    fam = problem.family.upper()
    if fam == "FIXEDQR":
        fam = "QR"
    params = problem.params
    index = _index(params)
    fam_check = {"QR": None}.get(fam, fam)
    if fam_check is not None and not stability_region(fam_check, params).stable(params.lam):
        raise Infeasible(f"{fam} has no stable policy at lambda={params.lam}")

    if fam == "SFC":
        return _optimize_sfc(params, index)
    if fam == "DET":
        return _optimize_det(problem, index, budget, rng_seed)
    if fam == "QR":
        if problem.pdist is None:
            raise ValueError("QR needs a fixed query distribution")
        enc = _Encoding("QR", params, index, pdist=problem.pdist)
    else:
        enc = _Encoding(fam, params, index)
    seed_x = None
    if seed_policy is not None:
        seed_x = enc.encode_policy(seed_policy.rule, seed_policy.assign) \
            if fam != "QR" else enc.encode_policy(None, seed_policy.assign)
    pol = _run(enc, fam, budget, rng_seed, seed_x, cap=objective_cap)
    if fam == "QR":
        pol.rule = None     # the query distribution is fixed; callers attach a rule
    return pol


def optimize_fixed_rule(params: SystemParams, rule, budget: Budget = Budget(),
                        rng_seed: int = 0) -> OptimizedPolicy:
    """Optimize only the assignment table for an individual querying rule."""
    verdict = stability_region(rule, params)
    if verdict.stable(params.lam) is False:
        raise Infeasible(f"{rule!r} is unstable at lambda={params.lam}")
    pdist = lower(rule, params)
    pol = optimize(OptimizationProblem("QR", params, pdist), budget=budget, rng_seed=rng_seed)
    pol.rule = rule
    return pol


def _optimize_sfc(params, index) -> OptimizedPolicy:
    t0 = time.perf_counter()
    best = None
    assign = fastest_idle(index)
    for c in range(params.s):
        rule = Sfc(c)
        if not stability_region(rule, params).stable(params.lam):
            continue
        try:
            kernel = RateKernel(params, lower(rule, params, index.space), assign)
            sol = solve_kernel(kernel)
        except (InstabilityDetected, NonConvergence):
            continue
        if best is None or sol.mean_T < best[0]:
            best = (sol.mean_T, rule, sol)
    if best is None:
        raise Infeasible("no single class can carry the load")
    return OptimizedPolicy("SFC", best[1], assign, float(best[0]), best[2],
                           {"starts": params.s, "best_start": f"class-{best[1].cls}",
                            "runtime": time.perf_counter() - t0, "feasible": True})


def _optimize_det(problem, index, budget, rng_seed) -> OptimizedPolicy:
    params = problem.params
    t0 = time.perf_counter()
    mixes = problem.mixes or index.space.mixes
    best = None
    for n, mix in enumerate(mixes):
        if not stability_region(Det(tuple(mix)), params).stable(params.lam):
            continue
        enc = _Encoding("DET", params, index, mix=tuple(mix))
        try:
            pol = _run(enc, "DET", budget, rng_seed + n)
        except Infeasible:
            continue
        if best is None or pol.objective < best.objective:
            best = pol
    if best is None:
        raise Infeasible("no deterministic mix admits a stable policy")
    best.solver_report["runtime"] = time.perf_counter() - t0
    best.solver_report["subproblems"] = len(mixes)
    return best


def optimize_gen_seeded(params: SystemParams, budget: Budget = Budget(),
                        rng_seed: int = 0, ind_policy: Optional[OptimizedPolicy] = None
                        ) -> OptimizedPolicy:
    """GEN search started from the IND optimum, capped at its objective + 1e-3.

    Falls back to the IND policy if the seeded search finds nothing feasible,
    and to an unseeded GEN search if IND itself fails.
    """
    t0 = time.perf_counter()
    if ind_policy is None:
        try:
            ind_policy = optimize(OptimizationProblem("IND", params), budget=budget,
                                  rng_seed=rng_seed)
        except Infeasible:
            ind_policy = None
    if ind_policy is None:
        pol = optimize(OptimizationProblem("GEN", params), budget=budget, rng_seed=rng_seed)
        pol.solver_report["fallback"] = "gen"
        pol.family = "GEN-SEEDED"
        return pol
    index = _index(params)
    enc = _Encoding("GEN", params, index)
    seed_x = enc.encode_policy(ind_policy.rule, ind_policy.assign)
    cap = ind_policy.objective + SEED_SLACK
    try:
        # the seed start alone, as in the warm-started formulation
        pol = _run(enc, "GEN", Budget(0, budget.iters), rng_seed, seed_x,
                   cap=cap, include_canonical=False)
        pol.solver_report["fallback"] = None
    except Infeasible:
        pol = OptimizedPolicy("GEN", Gen(tuple(lower(ind_policy.rule, params).p)),
                              ind_policy.assign, ind_policy.objective,
                              ind_policy.solution, dict(ind_policy.solver_report))
        pol.solver_report["fallback"] = "ind"
    pol.family = "GEN-SEEDED"
    pol.solver_report["runtime"] = time.perf_counter() - t0
    pol.solver_report["ind_objective"] = ind_policy.objective
    return pol


# ---------------------------------------------------------------------------
# SRC querying with JSQ assignment: independent homogeneous subsystems
# ---------------------------------------------------------------------------

def jsq_class_response(x: float, mu: float, d: int, eps: float = 1e-14) -> float:
    """Mean response time of a homogeneous power-of-d JSQ system at load x."""
    if x <= 0:
        return 1.0 / mu
    if x >= 1:
        return math.inf
    total, m = 0.0, 1
    while True:
        expo = m if d == 1 else (d ** m - 1) // (d - 1)
        term = x ** expo
        total += term
        if term < eps or m > 10_000:
            break
        m += 1
    return total / (x * mu)


def src_jsq_objective(params: SystemParams, phat) -> float:
    lam, d = params.lam, params.d
    out = 0.0
    for i in range(params.s):
        if phat[i] <= 0:
            continue
        x = lam * phat[i] / (params.q[i] * params.mu[i])
        if x >= 1:
            return math.inf
        out += phat[i] * jsq_class_response(x, params.mu[i], d)
    return out


def optimize_src_jsq(params: SystemParams, budget: Budget = Budget(),
                     rng_seed: int = 0) -> OptimizedPolicy:
    if params.lam >= 1:
        raise Infeasible("SRC cannot be stable for lambda >= 1")
    t0 = time.perf_counter()
    cap = params.mu_arr * params.q_arr
    rng = np.random.Generator(np.random.Philox(rng_seed))
    starts = [cap] + [rng.dirichlet(np.ones(params.s)) for _ in range(budget.starts)]

    def f(x):
        ph = project_simplex(x)
        val = src_jsq_objective(params, ph)
        drift = float(np.sum((x - ph) ** 2))
        if not math.isfinite(val):
            load = params.lam * ph / cap
            return PENALTY * (1 + float(np.max(load))) + drift
        return val + drift

    best = None
    for k, x0 in enumerate(starts):
        res = sopt.minimize(f, x0, method="Nelder-Mead",
                            options={"maxfev": budget.iters, "xatol": 1e-10,
                                     "fatol": 1e-13, "adaptive": True})
        ph = project_simplex(res.x)
        val = src_jsq_objective(params, ph)
        if math.isfinite(val) and (best is None or val < best[0]):
            best = (val, k, ph)
    if best is None:
        raise Infeasible("no SRC split keeps every class below saturation")
    return OptimizedPolicy("SRC-JSQ", Src(tuple(best[2])), None, float(best[0]), None,
                           {"starts": len(starts), "best_start": best[1],
                            "runtime": time.perf_counter() - t0, "feasible": True},
                           assignment_rule="JSQ")

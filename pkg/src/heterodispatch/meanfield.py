"""Mean-field fixed point for CID dispatching and the mean response time.

For a class-i server let ``lambda_I`` (``lambda_B``) be the arrival rate it
sees while idle (busy) and ``rho`` its busy fraction.  Both rates are
explicit functions of the vector ``rho`` once the mix distribution and the
assignment table are fixed, and ``rho_i = lambda_I / (mu_i - lambda_B +
lambda_I)`` closes the system.  We therefore iterate on ``rho`` (s unknowns)
rather than on the 2s rates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy import optimize

from .assignment import CidAssignment
from .core import SystemParams, admissible
from .querying import QueryDistribution

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 10_000
NEWTON_MAX_ITER = 50
BUSY_MARGIN = 1e-9
DAMPING = 0.5
RHO_FLOOR = 1e-30


class InstabilityDetected(RuntimeError):
    def __init__(self, message, cls: Optional[int] = None, best=None):
        super().__init__(message)
        self.cls = cls
        self.best = best


class NonConvergence(RuntimeError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class Exponential:
    c2 = 1.0


@dataclass(frozen=True)
class GeneralFCFS:
    c2: float

    def __post_init__(self):
        if not self.c2 >= 0:
            raise ValueError("squared coefficient of variation must be >= 0")


@dataclass
class RateSolution:
    lambda_idle: np.ndarray
    lambda_busy: np.ndarray
    rho: np.ndarray
    mean_T: float
    residual: float
    iterations: int
    converged: bool
    method: str = "damped"
    per_class_T: np.ndarray = field(default=None, repr=False)

    @property
    def throughput(self) -> np.ndarray:
        """Per-server job rate (1 - rho) lambda_I + rho lambda_B for each class."""
        return (1 - self.rho) * self.lambda_idle + self.rho * self.lambda_busy


_LAYOUTS = {}


def table_layout(index):
    """Positions (mix, i, j) of every admissible entry and its triple index."""
    key = id(index)
    hit = _LAYOUTS.get(key)
    if hit is not None and hit[0] is index:
        return hit[1]
    s = index.space.s
    rows = []
    for n, mix in enumerate(index.space.mixes):
        for j in range(s + 1):
            k = index.key(j, mix)
            for i in range(s):
                if admissible(i, j, mix):
                    rows.append((n, i, j, index.t_index[(i, j, k)]))
    arr = tuple(np.array(c, dtype=np.int64) for c in zip(*rows))
    _LAYOUTS[key] = (index, arr)
    return arr


class RateKernel:
    """Precomputed evaluation of both rate families for one policy."""

    def __init__(self, params: SystemParams, pdist: QueryDistribution,
                 assign: CidAssignment):
        space = pdist.space
        if (space.s, space.d) != (params.s, params.d):
            raise ValueError("query distribution does not match parameters")
        if assign.index.space is not space and assign.index.space.mixes != space.mixes:
            raise ValueError("assignment table does not match the mix space")
        self.params = params
        s = params.s
        self.s = s
        self.mu = params.mu_arr
        self.q = params.q_arr
        self.lam = params.lam
        keep = np.nonzero(pdist.p > 0)[0]
        mixes = [space.mixes[n] for n in keep]
        self.p = pdist.p[keep]
        self.D = np.array(mixes, dtype=np.int64).reshape(len(mixes), s)
        # A[n, i, j] = alpha_i(j, key(j, mix_n)); zeros on pruned entries
        nn, ii, jj, tt = table_layout(assign.index)
        full = np.zeros((len(space), s, s + 1))
        full[nn, ii, jj] = assign.values[tt]
        A = full[keep]
        self.A = A
        self.dmax = int(params.d)
        self.weights = (self.lam / self.q)
        # classes that can ever receive a job
        recv = (A.sum(axis=2) > 0) & (self.D > 0)
        self.reachable = (self.p[:, None] * recv).sum(axis=0) > 0
        ar = np.arange(s)
        self.idle_w = self.p[:, None] * A[:, ar, ar]                 # (N, s)
        upper = np.triu(np.ones((s, s + 1)), k=1)
        self.busy_w = self.p[:, None, None] * A * upper[None]       # (N, s, s+1)
        self._cols = ar[None, :]
        self._ext = np.zeros((len(mixes), 1))

    def rates(self, rho: np.ndarray):
        # A tiny floor keeps b_j / rho_i finite; it changes rates by O(1e-30).
        rho = np.maximum(np.asarray(rho, dtype=float), RHO_FLOOR)
        pw = rho[None, :] ** self.D                                   # (N, s)
        b = np.concatenate([np.ones_like(self._ext), np.cumprod(pw, axis=1)], axis=1)
        powers = rho[None, :] ** np.arange(self.dmax)[:, None]       # (d, s)
        csum = np.vstack([np.zeros((1, self.s)), np.cumsum(powers, axis=0)])
        G = csum[self.D, self._cols]              # sum_{m < d_i} rho_i^m
        lam_I = np.einsum("ni,ni,ni->i", self.idle_w, b[:, :-1], G)
        W = b * (1.0 - np.concatenate([pw, self._ext], axis=1))
        lam_B = np.einsum("nij,nj->i", self.busy_w, W) / rho
        return lam_I * self.weights, lam_B * self.weights

    def update(self, rho):
        lam_I, lam_B = self.rates(rho)
        denom = self.mu - lam_B + lam_I
        with np.errstate(divide="ignore", invalid="ignore"):
            new = np.where(lam_I > 0, lam_I / np.where(denom > 0, denom, np.nan), 0.0)
        return new, lam_I, lam_B

    def balance_residual(self, rho):
        """rho_i (mu_i - lambda_B + lambda_I) - lambda_I: smooth in rho."""
        lam_I, lam_B = self.rates(rho)
        return rho * (self.mu - lam_B + lam_I) - lam_I


def _finish(kernel: RateKernel, rho, iterations, method, tol) -> RateSolution:
    new, lam_I, lam_B = kernel.update(rho)
    residual = float(np.max(np.abs(np.nan_to_num(new, nan=np.inf) - rho)))
    sol = RateSolution(lam_I, lam_B, np.asarray(rho, dtype=float), math.nan,
                       residual, iterations, residual < tol, method)
    return sol


def _check_stable(kernel: RateKernel, sol: RateSolution):
    mu = kernel.mu
    bad = np.nonzero((sol.lambda_busy >= mu * (1 - BUSY_MARGIN)) | (sol.rho >= 1 - BUSY_MARGIN))[0]
    if bad.size:
        raise InstabilityDetected(
            f"busy arrival rate reaches service rate for class {int(bad[0]) + 1}",
            cls=int(bad[0]), best=sol)


def _newton(kernel: RateKernel, start, tol, used):
    res = optimize.root(kernel.balance_residual, start, method="hybr",
                        options={"xtol": 1e-13,
                                 "maxfev": NEWTON_MAX_ITER * (kernel.s + 1)})
    x = np.asarray(res.x, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(x >= -1e-12) and np.all(x < 1)):
        return None
    x = np.where(kernel.reachable, np.clip(x, 0.0, None), 0.0)
    return _finish(kernel, x, used + int(res.nfev), "newton", tol)


def solve_kernel(kernel: RateKernel, tol: float = DEFAULT_TOL,
                 max_iter: int = DEFAULT_MAX_ITER, rho0=None,
                 service=None, newton_first: bool = False) -> RateSolution:
    """Damped iteration on rho with a Newton-type fallback.

    ``newton_first`` tries the Newton step from ``rho0`` before iterating,
    which pays off for warm starts close to the solution.
    """
    params = kernel.params
    mu, q, lam = kernel.mu, kernel.q, kernel.lam
    cap = float(np.sum((mu * q)[kernel.reachable]))
    if lam >= cap:
        raise InstabilityDetected(
            f"arrival rate {lam} exceeds the capacity {cap} of the classes that can receive jobs")
    if rho0 is None:
        rho = np.clip(lam / mu, 0.0, 0.99)
    else:
        rho = np.clip(np.asarray(rho0, dtype=float), 0.0, 0.99)
    rho = np.where(kernel.reachable, rho, 0.0)

    if newton_first:
        sol = _newton(kernel, rho, tol, 0)
        if sol is not None and sol.converged and not _saturated(kernel, sol):
            return _with_T(params, sol, service)

    history = []
    it = 0
    converged = False
    stalled = False
    for it in range(1, max_iter + 1):
        new, lam_I, lam_B = kernel.update(rho)
        if np.any(~np.isfinite(new)) or np.any(lam_B >= mu * (1 - BUSY_MARGIN)):
            stalled = True
            break
        new = np.minimum(new, 1 - 1e-15)
        step = float(np.max(np.abs(new - rho)))
        if step < tol:
            rho = new
            converged = True
            break
        rho = (1 - DAMPING) * rho + DAMPING * new
        history.append(step)
        # hand over to Newton when the contraction is too slow
        if it % 50 == 0 and len(history) > 50 and step > 0.1 * history[-51]:
            stalled = True
            break
    if converged:
        sol = _finish(kernel, rho, it, "damped", tol)
        if sol.converged:
            _check_stable(kernel, sol)
            return _with_T(params, sol, service)

    best = _finish(kernel, rho, it, "damped", tol)
    for start in (rho, np.clip(lam / mu, 0.0, 0.99)):
        sol = _newton(kernel, start, tol, it)
        if sol is None:
            continue
        if sol.converged:
            _check_stable(kernel, sol)
            return _with_T(params, sol, service)
        if sol.residual < best.residual:
            best = sol
    load = best.lambda_busy / mu
    if np.max(best.rho) > 0.999 or np.max(load) > 0.99 or (stalled and np.max(load) > 0.9):
        cls = int(np.argmax(load))
        raise InstabilityDetected(
            f"no stable fixed point found; class {cls + 1} saturates", cls=cls, best=best)
    raise NonConvergence(f"fixed point not reached (residual {best.residual:.3g})", best=best)


def _saturated(kernel, sol):
    return bool(np.any(sol.lambda_busy >= kernel.mu * (1 - BUSY_MARGIN))
                or np.any(sol.rho >= 1 - BUSY_MARGIN))


def _with_T(params, sol, service):
    service = service or Exponential()
    sol.mean_T = mean_response_time(params, sol, service)
    sol.per_class_T = class_response_times(params, sol.lambda_busy, service)
    return sol


def solve_fixed_point(params: SystemParams, pdist: QueryDistribution,
                      assign: CidAssignment, tol: float = DEFAULT_TOL,
                      max_iter: int = DEFAULT_MAX_ITER, rho0=None,
                      service=None) -> RateSolution:
    """Solve for the idle/busy arrival rates and utilizations of every class.

    Raises ``InstabilityDetected`` when the iterates drive a class to
    saturation and ``NonConvergence`` otherwise.  Both carry the best iterate
    in ``.best``.
    """
    kernel = RateKernel(params, pdist, assign)
    return solve_kernel(kernel, tol, max_iter, rho0, service)


def find_fixed_points(params, pdist, assign, starts: int = 20, rng=None,
                      tol: float = DEFAULT_TOL, distinct_tol: float = 1e-6) -> List[RateSolution]:
    """Multi-start search; returns every distinct fixed point that was found."""
    rng = rng if rng is not None else np.random.default_rng(0)
    kernel = RateKernel(params, pdist, assign)
    found: List[RateSolution] = []
    for _ in range(starts):
        try:
            sol = solve_kernel(kernel, tol, rho0=rng.uniform(0, 0.99, size=params.s))
        except (InstabilityDetected, NonConvergence):
            continue
        if all(np.max(np.abs(sol.rho - f.rho)) > distinct_tol for f in found):
            found.append(sol)
    return found


def class_response_times(params: SystemParams, lambda_busy, service=None) -> np.ndarray:
    """Mean time in system of a job sent to a class-i server, per class."""
    service = service or Exponential()
    mu = params.mu_arr
    lam_B = np.asarray(lambda_busy, dtype=float)
    if np.any(lam_B >= mu):
        raise ValueError("busy arrival rate must stay below the service rate")
    if isinstance(service, Exponential):
        return 1.0 / (mu - lam_B)
    if isinstance(service, GeneralFCFS):
        return (1 + service.c2) * lam_B / (2 * mu * (mu - lam_B)) + 1.0 / mu
    raise TypeError(f"unknown service model {service!r}")


def mean_response_time(params: SystemParams, sol: RateSolution, service=None) -> float:
    """Mean time in system, exponential or general (FCFS) service."""
    per = class_response_times(params, sol.lambda_busy, service)
    lam_i = (1 - sol.rho) * sol.lambda_idle + sol.rho * sol.lambda_busy
    return float(np.sum(params.q_arr * lam_i * per) / params.lam)


def conservation_gap(params: SystemParams, sol: RateSolution) -> float:
    lam_i = (1 - sol.rho) * sol.lambda_idle + sol.rho * sol.lambda_busy
    return float(abs(np.sum(params.q_arr * lam_i) - params.lam))


# ---------------------------------------------------------------------------
# Sensitivities
# ---------------------------------------------------------------------------

@dataclass
class RateSensitivity:
    """Rates at fixed rho and their (exact) derivatives in p and in the table.

    For fixed ``rho`` both rates are linear in the mix probabilities and in
    the assignment values, so ``lambda_idle == dI_dp @ p`` and likewise for
    the other blocks.
    """

    lambda_idle: np.ndarray
    lambda_busy: np.ndarray
    dI_dp: np.ndarray        # (s, |D|)
    dB_dp: np.ndarray
    dI_dv: np.ndarray        # (s, |T|)
    dB_dv: np.ndarray


def rate_sensitivities(params: SystemParams, pdist: QueryDistribution,
                       assign: CidAssignment, rho) -> RateSensitivity:
    space = pdist.space
    s = params.s
    D = space.counts
    N = len(space)
    rho = np.maximum(np.asarray(rho, dtype=float), RHO_FLOOR)
    nn, ii, jj, tt = table_layout(assign.index)
    A = np.zeros((N, s, s + 1))
    A[nn, ii, jj] = assign.values[tt]
    pw = rho[None, :] ** D
    b = np.concatenate([np.ones((N, 1)), np.cumprod(pw, axis=1)], axis=1)
    powers = rho[None, :] ** np.arange(params.d)[:, None]
    csum = np.vstack([np.zeros((1, s)), np.cumsum(powers, axis=0)])
    G = csum[D, np.arange(s)[None, :]]
    W = b * (1.0 - np.concatenate([pw, np.zeros((N, 1))], axis=1))
    w = params.lam / params.q_arr
    ar = np.arange(s)
    dI_dp = w[:, None] * (A[:, ar, ar] * b[:, :-1] * G).T
    upper = np.triu(np.ones((s, s + 1)), k=1)
    dB_dp = (w / rho)[:, None] * np.einsum("nij,nj->in", A * upper[None], W)
    p = pdist.p
    nT = len(assign.index.T)
    dI_dv = np.zeros((s, nT))
    dB_dv = np.zeros((s, nT))
    diag = ii == jj
    np.add.at(dI_dv, (ii[diag], tt[diag]),
              w[ii[diag]] * p[nn[diag]] * b[nn[diag], ii[diag]] * G[nn[diag], ii[diag]])
    up = jj > ii
    np.add.at(dB_dv, (ii[up], tt[up]),
              (w / rho)[ii[up]] * p[nn[up]] * W[nn[up], jj[up]])
    return RateSensitivity(dI_dp @ p, dB_dp @ p, dI_dp, dB_dp, dI_dv, dB_dv)


def objective_gradient(params: SystemParams, pdist: QueryDistribution,
                       assign: CidAssignment, sol: RateSolution, h: float = 1e-7,
                       kernel: Optional[RateKernel] = None):
    """Gradient of the exponential-service E[T] at a fixed point.

    Returns ``(g_p, g_v)``: derivatives with respect to every mix probability
    and every table value, with rho moving along the fixed point (adjoint of
    the balance equations).  The rho-Jacobian is taken by finite differences.
    """
    kernel = kernel or RateKernel(params, pdist, assign)
    mu, q, lam = params.mu_arr, params.q_arr, params.lam
    rho = np.asarray(sol.rho, dtype=float)
    s = params.s

    def parts(r):
        lI, lB = kernel.rates(r)
        lam_i = (1 - r) * lI + r * lB
        return float(np.sum(q * lam_i / (mu - lB)) / lam), r * (mu - lB + lI) - lI

    J = np.zeros((s, s))
    E_r = np.zeros(s)
    for k in range(s):
        step = h * max(1.0, rho[k])
        up = rho.copy()
        up[k] += step
        if rho[k] > step:
            dn = rho.copy()
            dn[k] -= step
            width = 2 * step
        else:
            dn, width = rho, step
        e_up, f_up = parts(up)
        e_dn, f_dn = parts(dn)
        J[:, k] = (f_up - f_dn) / width
        E_r[k] = (e_up - e_dn) / width
    sens = rate_sensitivities(params, pdist, assign, rho)
    lI, lB = sens.lambda_idle, sens.lambda_busy
    T = 1.0 / (mu - lB)
    lam_i = (1 - rho) * lI + rho * lB
    e_I = q * (1 - rho) * T / lam
    e_B = q * (rho * T + lam_i * T * T) / lam
    adj = np.linalg.solve(J.T, E_r)
    c_I = e_I - adj * (rho - 1)
    c_B = e_B + adj * rho
    g_p = c_I @ sens.dI_dp + c_B @ sens.dB_dp
    g_v = c_I @ sens.dI_dv + c_B @ sens.dB_dv
    return g_p, g_v


def analyze(params, rule, assign, service=None, **kw) -> RateSolution:
    """Convenience wrapper: lower ``rule`` and solve."""
    from .querying import lower
    pdist = lower(rule, params, assign.index.space)
    return solve_fixed_point(params, pdist, assign, service=service, **kw)

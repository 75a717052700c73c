"""Finite-k simulation of power-of-d dispatching with FCFS servers.

Every server is FCFS, so a job's departure time is fixed the moment it is
assigned: ``max(now, last departure) + size``.  Each server therefore only
keeps the departure times of the jobs it holds (popped lazily as time
advances); the number still pending is its queue length.  Arrivals are
processed in time order, which makes a global event heap unnecessary.
"""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .assignment import CidAssignment
from .core import SystemParams, enumerate_mixes
from .querying import lower, stability_region

CLD_KINDS = ("JSQ", "JSQ*", "SED", "SED*", "SEW", "SEW*")
OVERFLOW = 1_000_000
SCORE_TOL = 1e-12


class SimulationOverflow(RuntimeError):
    pass


@dataclass(frozen=True)
class CldRule:
    """A queue-length aware rule (JSQ, SED, SEW and their '*' variants), or a
    CID table via ``kind="CID"`` and ``assign``."""

    kind: str
    assign: Optional[CidAssignment] = None

    def __post_init__(self):
        k = self.kind.upper().replace("STAR", "*")
        object.__setattr__(self, "kind", k)
        if k == "CID":
            if self.assign is None:
                raise ValueError("CID rule needs an assignment table")
        elif k not in CLD_KINDS:
            raise ValueError(f"unknown assignment rule {self.kind!r}")


@dataclass(frozen=True)
class Exponential:
    name = "exponential"


@dataclass(frozen=True)
class Hyperexponential:
    """Rate 5 mu / 2 or 5 mu / 8 with probability 1/2 each (mean 1/mu, C^2 = 1.72)."""

    name = "hyperexponential"
    fast: float = 2.5
    slow: float = 0.625
    p_fast: float = 0.5

    @property
    def c2(self) -> float:
        m1 = self.p_fast / self.fast + (1 - self.p_fast) / self.slow
        m2 = 2 * (self.p_fast / self.fast ** 2 + (1 - self.p_fast) / self.slow ** 2)
        return m2 / m1 ** 2 - 1


def sample_service(service, mu: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Vector of ``n`` job sizes on a server of rate ``mu``."""
    e = rng.standard_exponential(n)
    if isinstance(service, Hyperexponential):
        fast = rng.random(n) < service.p_fast
        rate = np.where(fast, service.fast * mu, service.slow * mu)
        return e / rate
    return e / mu


@dataclass(frozen=True)
class SimConfig:
    k: int
    horizon: int
    warmup: Optional[int] = None      # default: 10% of the horizon
    rng_seed: int = 0
    service: object = Exponential()
    batches: int = 20
    pairs_per_class: int = 200
    sample_every: int = 50

    def __post_init__(self):
        if self.k < 1 or self.horizon < 1:
            raise ValueError("k and horizon must be positive")
        if self.warmup is not None and not 0 <= self.warmup < self.horizon:
            raise ValueError("warmup must be smaller than the horizon")

    @property
    def n_warmup(self) -> int:
        return self.horizon // 10 if self.warmup is None else self.warmup


@dataclass
class SimResult:
    mean_T: float
    stderr: float
    per_class_rho: np.ndarray
    independence_stats: dict
    per_class_T: np.ndarray = None
    arrivals: int = 0
    rng_seed: int = 0
    server_counts: tuple = ()
    mix_counts: np.ndarray = None
    rho_stderr: np.ndarray = None


def apportion(k: int, q: Sequence[float]) -> List[int]:
    """Largest-remainder split of k servers by class fractions q."""
    raw = [k * x for x in q]
    base = [int(math.floor(r)) for r in raw]
    left = k - sum(base)
    order = sorted(range(len(q)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    if any(b == 0 for b in base):
        raise ValueError(f"k={k} leaves some class without servers")
    return base


class _Uniforms:
    """Buffered uniform draws (scalar calls into numpy are slow)."""

    def __init__(self, rng, chunk=1 << 16):
        self.rng = rng
        self.chunk = chunk
        self.buf = rng.random(chunk).tolist()
        self.pos = 0

    def __call__(self) -> float:
        if self.pos >= self.chunk:
            self.buf = self.rng.random(self.chunk).tolist()
            self.pos = 0
        u = self.buf[self.pos]
        self.pos += 1
        return u


class _Sizes:
    def __init__(self, rng, service, mu, chunk=1 << 15):
        self.rng, self.service, self.mu, self.chunk = rng, service, mu, chunk
        self.bufs = [[] for _ in mu]

    def __call__(self, c: int) -> float:
        b = self.bufs[c]
        if not b:
            b.extend(sample_service(self.service, self.mu[c], self.chunk, self.rng)[::-1].tolist())
        return b.pop()


def cld_assign(rule: CldRule, queried, mu: Sequence[float], u: float,
               u2: float = 0.0) -> int:
    """Position (within ``queried``) of the server that receives the job.

    ``queried`` is a list of ``(class, queue_length)`` pairs; ``u`` and ``u2``
    are uniform(0, 1) draws used for the randomized choices.
    """
    kind = rule.kind
    if not queried:
        raise ValueError("no queried servers")
    pos = list(range(len(queried)))
    if kind == "CID":
        return _cid_pick(rule.assign, queried, u, u2)
    if kind.startswith("JSQ"):
        scores = [float(n) for _, n in queried]
    elif kind.startswith("SED"):
        scores = [(n + 1) / mu[c] for c, n in queried]
    else:
        scores = [n / mu[c] for c, n in queried]
    best = min(scores)
    tol = SCORE_TOL * max(1.0, abs(best))
    cands = [p for p in pos if scores[p] <= best + tol]
    if kind.endswith("*"):
        fastest = min(queried[p][0] for p in cands)
        cands = [p for p in cands if queried[p][0] == fastest]
    return cands[int(u * len(cands))] if len(cands) > 1 else cands[0]


def _cid_pick(assign: CidAssignment, queried, u, u2) -> int:
    s = assign.s
    mix = [0] * s
    for c, _ in queried:
        mix[c] += 1
    J = min((c for c, n in queried if n == 0), default=s)
    acc = 0.0
    chosen = None
    last = None
    for i in range(min(J, s - 1) + 1):
        a = assign.lookup(i, J, mix)
        if a <= 0:
            continue
        last = i
        acc += a
        if u < acc:
            chosen = i
            break
    if chosen is None:
        chosen = last
    want_idle = chosen == J
    cands = [p for p, (c, n) in enumerate(queried) if c == chosen and ((n == 0) == want_idle)]
    return cands[int(u2 * len(cands))] if len(cands) > 1 else cands[0]


def simulate(params: SystemParams, rule, assign, cfg: SimConfig) -> SimResult:
    """Simulate ``cfg.horizon`` arrivals and report post-warmup statistics.

    ``assign`` is a ``CldRule`` or a ``CidAssignment`` (shorthand for a
    CID table).
    """
    if isinstance(assign, CidAssignment):
        assign = CldRule("CID", assign)
    s, d, lam = params.s, params.d, params.lam
    counts = apportion(cfg.k, params.q)
    if any(c < d for c in counts):
        raise ValueError("every class needs at least d servers so queries are distinct")
    space = enumerate_mixes(s, d)
    pdist = lower(rule, params, space)
    if stability_region(rule, params).stable(lam) is False:
        warnings.warn(f"{rule!r} is not stable at lambda={lam}; queues will grow",
                      RuntimeWarning, stacklevel=2)
    rng = np.random.Generator(np.random.Philox(cfg.rng_seed))
    mu = list(params.mu)
    offsets = [0]
    for c in counts:
        offsets.append(offsets[-1] + c)
    k = offsets[-1]

    horizon = cfg.horizon
    warm = cfg.n_warmup
    inter = (rng.standard_exponential(horizon) / (lam * k)).tolist()
    cum = np.cumsum(pdist.p)
    mix_ids = np.minimum(np.searchsorted(cum, rng.random(horizon), side="right"),
                         len(space) - 1).tolist()
    mixes = space.mixes
    uni = _Uniforms(rng)
    sizes = _Sizes(rng, cfg.service, mu)

    need_len = assign.kind != "CID"
    last_dep = [0.0] * k
    queues = [deque() for _ in range(k)] if need_len else None

    # CID: cumulative class distribution for every (mix, J)
    cid_table = None
    if assign.kind == "CID":
        cid_table = {}
        for n, mix in enumerate(mixes):
            for J in range(s + 1):
                probs = [(i, assign.assign.lookup(i, J, mix)) for i in range(s)]
                probs = [(i, a) for i, a in probs if a > 0]
                if probs:
                    acc, lst = 0.0, []
                    for i, a in probs:
                        acc += a
                        lst.append((acc, i))
                    cid_table[(n, J)] = lst

    # supplementary independence diagnostics: fixed server pairs per class
    pair_rng = np.random.Generator(np.random.Philox(cfg.rng_seed + 7919))
    pairs = []
    for c in range(s):
        if counts[c] >= 2:
            for _ in range(cfg.pairs_per_class):
                a, b = pair_rng.choice(counts[c], size=2, replace=False)
                pairs.append((c, offsets[c] + int(a), offsets[c] + int(b)))
    samples = []

    resp = []
    per_class_sum = [0.0] * s
    per_class_n = [0] * s
    busy_work = [0.0] * s
    post_cls, post_size, post_t = [], [], []
    t = 0.0
    t_warm = None
    for n_arr in range(horizon):
        t += inter[n_arr]
        if n_arr == warm:
            t_warm = t
        mi = mix_ids[n_arr]
        mix = mixes[mi]
        # query distinct servers within each class
        q_servers = []
        q_classes = []
        for c in range(s):
            m = mix[c]
            if m == 0:
                continue
            base, kc = offsets[c], counts[c]
            chosen = []
            while len(chosen) < m:
                srv = base + int(uni() * kc)
                if srv not in chosen:
                    chosen.append(srv)
            q_servers.extend(chosen)
            q_classes.extend([c] * m)

        if need_len:
            queried = []
            for srv, c in zip(q_servers, q_classes):
                qd = queues[srv]
                while qd and qd[0] <= t:
                    qd.popleft()
                queried.append((c, len(qd)))
            p = cld_assign(assign, queried, mu, uni())
        else:
            idle = [last_dep[srv] <= t for srv in q_servers]
            J = s
            for c, free in zip(q_classes, idle):
                if free and c < J:
                    J = c
            lst = cid_table[(mi, J)]
            u = uni()
            cls = lst[-1][1]
            for acc, i in lst:
                if u < acc:
                    cls = i
                    break
            want_idle = cls == J
            cands = [p for p, (c, free) in enumerate(zip(q_classes, idle))
                     if c == cls and free == want_idle]
            p = cands[int(uni() * len(cands))] if len(cands) > 1 else cands[0]

        srv = q_servers[p]
        c = q_classes[p]
        size = sizes(c)
        start = last_dep[srv] if last_dep[srv] > t else t
        dep = start + size
        last_dep[srv] = dep
        if need_len:
            qd = queues[srv]
            qd.append(dep)
            if len(qd) > OVERFLOW:
                raise SimulationOverflow(f"queue at server {srv} exceeded {OVERFLOW}")
        elif (dep - t) * mu[c] > OVERFLOW:
            # without queue lengths, bound the backlog in expected jobs instead
            raise SimulationOverflow(f"backlog at server {srv} exceeded {OVERFLOW} jobs")
        if n_arr >= warm:
            r = dep - t
            resp.append(r)
            per_class_sum[c] += r
            per_class_n[c] += 1
            busy_work[c] += size
            post_cls.append(c)
            post_size.append(size)
            post_t.append(t)
            if pairs and (n_arr - warm) % cfg.sample_every == 0:
                samples.append([(last_dep[a] > t, last_dep[b] > t) for _, a, b in pairs])

    resp_arr = np.asarray(resp)
    span = t - (t_warm if t_warm is not None else 0.0)
    nb = max(2, min(cfg.batches, resp_arr.size // 2))
    means = np.array([b.mean() for b in np.array_split(resp_arr, nb)])
    stderr = float(means.std(ddof=1) / math.sqrt(nb))
    rho = np.array([busy_work[c] / (counts[c] * span) if span > 0 else math.nan
                    for c in range(s)])
    rho_se = _rho_stderr(np.asarray(post_cls), np.asarray(post_size), np.asarray(post_t),
                         t_warm, counts, nb)
    per_T = np.array([per_class_sum[c] / per_class_n[c] if per_class_n[c] else math.nan
                      for c in range(s)])
    return SimResult(float(resp_arr.mean()), stderr, rho,
                     _independence_summary(pairs, samples, s), per_T,
                     horizon, cfg.rng_seed, tuple(counts),
                     np.bincount(mix_ids, minlength=len(space)), rho_se)


def _rho_stderr(cls, size, times, t0, counts, nb):
    """Batch-means standard error of the per-class utilization estimate."""
    s = len(counts)
    if cls.size < 2 * nb:
        return np.full(s, math.nan)
    edges = np.linspace(0, cls.size, nb + 1).astype(int)
    starts = np.concatenate([[t0 if t0 is not None else 0.0], times[edges[1:-1]]])
    ends = np.concatenate([times[edges[1:-1]], [times[-1]]])
    est = np.zeros((nb, s))
    for b in range(nb):
        sl = slice(edges[b], edges[b + 1])
        span = ends[b] - starts[b]
        work = np.bincount(cls[sl], weights=size[sl], minlength=s)
        est[b] = work / (np.asarray(counts) * span)
    return est.std(axis=0, ddof=1) / math.sqrt(nb)


def _independence_summary(pairs, samples, s) -> dict:
    if not pairs or len(samples) < 3:
        return {"pairs": 0, "samples": len(samples), "mean_corr": [math.nan] * s}
    arr = np.asarray(samples, dtype=float)          # (samples, pairs, 2)
    out = []
    for c in range(s):
        cols = [n for n, (cc, _, _) in enumerate(pairs) if cc == c]
        if not cols:
            out.append(math.nan)
            continue
        cors = []
        for n in cols:
            x, y = arr[:, n, 0], arr[:, n, 1]
            if x.std() > 0 and y.std() > 0:
                cors.append(float(np.corrcoef(x, y)[0, 1]))
        out.append(float(np.mean(cors)) if cors else math.nan)
    return {"pairs": len(pairs), "samples": len(samples), "mean_corr": out}


def consistent_runs(results: Sequence[SimResult], rel: float = 0.01) -> bool:
    """True when the run-to-run spread of mean_T stays within ``rel`` of the mean.

    Points failing this check are discarded from reported curves.
    """
    vals = np.array([r.mean_T for r in results])
    if vals.size < 2:
        return True
    return float(vals.std(ddof=1)) <= rel * float(vals.mean())


def independence_experiment(params: SystemParams, rule, assign: CidAssignment,
                            k_grid: Sequence[int], cfg: SimConfig,
                            analytic: Optional[float] = None) -> List[dict]:
    """Simulated mean response time for each k next to the k -> infinity value."""
    from .meanfield import GeneralFCFS, analyze
    if analytic is None:
        service = None
        if isinstance(cfg.service, Hyperexponential):
            service = GeneralFCFS(cfg.service.c2)
        analytic = analyze(params, rule, assign, service=service).mean_T
    rows = []
    for k in k_grid:
        run_cfg = SimConfig(k, cfg.horizon, cfg.warmup, cfg.rng_seed, cfg.service,
                            cfg.batches, cfg.pairs_per_class, cfg.sample_every)
        res = simulate(params, rule, assign, run_cfg)
        rows.append({"k": k, "mean_T": res.mean_T, "stderr": res.stderr,
                     "analytic": analytic, "gap": abs(res.mean_T - analytic)})
    return rows

"""Querying rules and their lowering to a distribution over query mixes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .core import Mix, MixSpace, SystemParams, enumerate_mixes, support

PROB_TOL = 1e-12


@dataclass(frozen=True)
class QueryDistribution:
    space: MixSpace
    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.shape != (len(self.space),):
            raise ValueError("distribution length does not match the mix space")
        if np.any(p < -PROB_TOL) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("not a probability vector")
        p = np.clip(p, 0.0, None)
        object.__setattr__(self, "p", p / p.sum())

    def prob(self, mix: Sequence[int]) -> float:
        return float(self.p[self.space.index[tuple(mix)]])

    def as_dict(self) -> dict:
        return {m: float(x) for m, x in zip(self.space.mixes, self.p) if x > 0}


# -- rule types ---------------------------------------------------------------

@dataclass(frozen=True)
class Gen:
    p: Tuple[float, ...]
    name = "GEN"


@dataclass(frozen=True)
class Iid:
    ptilde: Tuple[float, ...]
    name = "IID"


@dataclass(frozen=True)
class Ind:
    ptilde_u: Tuple[Tuple[float, ...], ...]   # d rows, one per query slot
    name = "IND"


@dataclass(frozen=True)
class Det:
    mix: Mix
    name = "DET"


@dataclass(frozen=True)
class Src:
    phat: Tuple[float, ...]
    name = "SRC"


@dataclass(frozen=True)
class Sfc:
    cls: int
    name = "SFC"


@dataclass(frozen=True)
class Uni:
    name = "UNI"


@dataclass(frozen=True)
class Br:
    name = "BR"


QueryingRule = Union[Gen, Iid, Ind, Det, Src, Sfc, Uni, Br]


def _check_stochastic(v, length, what):
    v = np.asarray(v, dtype=float)
    if v.shape != (length,):
        raise ValueError(f"{what}: expected length {length}, got shape {v.shape}")
    if np.any(v < -PROB_TOL) or abs(v.sum() - 1.0) > 1e-9:
        raise ValueError(f"{what}: not a probability vector")
    return np.clip(v, 0.0, None)


def multinomial_pmf(space: MixSpace, ptilde) -> np.ndarray:
    out = np.empty(len(space))
    pt = np.asarray(ptilde, dtype=float)
    for n, mix in enumerate(space.mixes):
        val = math.factorial(space.d)
        for i, c in enumerate(mix):
            if c:
                val *= pt[i] ** c / math.factorial(c)
        out[n] = val
    return out


def independent_pmf(space: MixSpace, ptilde_u) -> np.ndarray:
    """Mix distribution when query slot u lands on class i w.p. ptilde_u[u, i].

    Equivalent to summing, over every way of splitting the d slots into
    class-labelled blocks of the prescribed sizes, the product of slot
    probabilities.  The sum is accumulated slot by slot.
    """
    s = space.s
    table = {tuple([0] * s): 1.0}
    for row in ptilde_u:
        nxt = {}
        for partial, w in table.items():
            for i in range(s):
                if row[i] == 0.0:
                    continue
                key = partial[:i] + (partial[i] + 1,) + partial[i + 1:]
                nxt[key] = nxt.get(key, 0.0) + w * row[i]
        table = nxt
    out = np.zeros(len(space))
    for mix, w in table.items():
        out[space.index[mix]] = w
    return out


def point_mass(space: MixSpace, mix) -> np.ndarray:
    out = np.zeros(len(space))
    out[space.index[tuple(mix)]] = 1.0
    return out


def lower(rule: QueryingRule, params: SystemParams,
          space: Optional[MixSpace] = None) -> QueryDistribution:
    """Map a querying rule to its distribution over query mixes."""
    s, d = params.s, params.d
    if space is None:
        space = enumerate_mixes(s, d)
    if (space.s, space.d) != (s, d):
        raise ValueError("mix space does not match the parameters")
    if isinstance(rule, Gen):
        p = _check_stochastic(rule.p, len(space), "GEN p")
    elif isinstance(rule, Iid):
        p = multinomial_pmf(space, _check_stochastic(rule.ptilde, s, "IID ptilde"))
    elif isinstance(rule, Ind):
        rows = np.asarray(rule.ptilde_u, dtype=float)
        if rows.shape != (d, s):
            raise ValueError(f"IND ptilde_u must have shape ({d}, {s})")
        rows = np.array([_check_stochastic(r, s, "IND row") for r in rows])
        p = independent_pmf(space, rows)
    elif isinstance(rule, Det):
        if tuple(rule.mix) not in space.index:
            raise ValueError(f"{rule.mix} is not a query mix for s={s}, d={d}")
        p = point_mass(space, rule.mix)
    elif isinstance(rule, Src):
        ph = _check_stochastic(rule.phat, s, "SRC phat")
        p = np.zeros(len(space))
        for i in range(s):
            mix = tuple(d if l == i else 0 for l in range(s))
            p[space.index[mix]] += ph[i]
    elif isinstance(rule, Sfc):
        if not 0 <= rule.cls < s:
            raise ValueError("SFC class out of range")
        p = point_mass(space, tuple(d if l == rule.cls else 0 for l in range(s)))
    elif isinstance(rule, Uni):
        p = multinomial_pmf(space, params.q)
    elif isinstance(rule, Br):
        p = multinomial_pmf(space, params.mu_arr * params.q_arr)
    else:
        raise TypeError(f"unknown querying rule {rule!r}")
    return QueryDistribution(space, p)


def br_ptilde(params: SystemParams) -> np.ndarray:
    return params.mu_arr * params.q_arr


# -- stability ---------------------------------------------------------------

@dataclass(frozen=True)
class StabilityVerdict:
    """``threshold``: stable iff lambda < threshold (None when unknown).

    ``necessary_violation`` is set when a known necessary condition for
    stability fails at the given arrival rate.
    """

    threshold: Optional[float]
    necessary_violation: bool

    def stable(self, lam: float) -> Optional[bool]:
        if self.necessary_violation:
            return False
        if self.threshold is None:
            return None
        return lam < self.threshold


def stability_region(rule, params: SystemParams) -> StabilityVerdict:
    """Stability thresholds for rules and for whole families.

    ``rule`` is either a rule instance or a family name (GEN, IND, IID, SRC,
    SFC, DET, BR, UNI).  For a family the threshold is that of its most
    stable member.  Instances of GEN, IID and IND have no simple threshold
    and yield ``threshold=None``.
    """
    cap = params.mu_arr * params.q_arr
    lam = params.lam
    if isinstance(rule, str):
        name = rule.upper()
        if name == "SFC":
            thr = float(cap.max())
        elif name in ("SRC", "IID", "IND", "GEN", "BR", "DET"):
            thr = 1.0
        elif name == "UNI":
            return _uni_verdict(params)
        else:
            raise ValueError(f"unknown family {rule!r}")
    elif isinstance(rule, Det):
        thr = float(sum(cap[i] for i in support(rule.mix)))
    elif isinstance(rule, Sfc):
        thr = float(cap[rule.cls])
    elif isinstance(rule, Src):
        # class i receives a share phat_i of all jobs
        ph = np.asarray(rule.phat, dtype=float)
        thr = float(min(cap[i] / ph[i] for i in range(params.s) if ph[i] > 0))
    elif isinstance(rule, Br):
        thr = 1.0
    elif isinstance(rule, Uni):
        return _uni_verdict(params)
    else:
        return StabilityVerdict(None, False)
    return StabilityVerdict(thr, lam >= thr)


def _uni_verdict(params: SystemParams) -> StabilityVerdict:
    bad = any(params.lam > params.mu[i] / params.q[i] ** (params.d - 1)
              for i in range(params.s))
    return StabilityVerdict(None, bad)

"""System parameters, query-mix enumeration, the gamma map and index sets.

Conventions used throughout the package
---------------------------------------
Server classes are indexed ``0 .. s-1`` from fastest to slowest.  The
"fastest idle queried class" ``J`` takes values in ``0 .. s``, where the
value ``s`` stands for "no queried server is idle".  A query mix is a tuple
of ``s`` nonnegative integers summing to ``d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Sequence, Tuple

import numpy as np

Mix = Tuple[int, ...]
Triple = Tuple[int, int, Mix]
Pair = Tuple[int, Mix]

NORMALIZATION_TOL = 1e-12
MAX_QUERY_SIZE = 10


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class SystemParams:
    """Environment tuple ``(s, d, lambda, mu, q)``.

    ``mu`` must be strictly decreasing and ``q`` strictly positive with unit
    sum.  With ``normalized=True`` (the default) the capacity normalization
    ``sum(mu * q) == 1`` is enforced as well; it can be switched off to study
    single-class systems with an arbitrary service rate.
    """

    s: int
    d: int
    lam: float
    mu: Tuple[float, ...]
    q: Tuple[float, ...]
    normalized: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mu", tuple(float(x) for x in self.mu))
        object.__setattr__(self, "q", tuple(float(x) for x in self.q))
        if self.s < 1 or self.d < 1:
            raise ParameterError("s and d must be at least 1")
        if self.d > MAX_QUERY_SIZE:
            raise ParameterError(f"d must not exceed {MAX_QUERY_SIZE}")
        if len(self.mu) != self.s or len(self.q) != self.s:
            raise ParameterError("mu and q must both have length s")
        vals = self.mu + self.q + (self.lam,)
        if not all(math.isfinite(v) for v in vals):
            raise ParameterError("parameters must be finite")
        if not self.lam > 0:
            raise ParameterError("lambda must be positive")
        if any(m <= 0 for m in self.mu):
            raise ParameterError("service rates must be positive")
        if any(self.mu[i] <= self.mu[i + 1] for i in range(self.s - 1)):
            raise ParameterError("mu must be strictly decreasing")
        if any(x <= 0 for x in self.q):
            raise ParameterError("class fractions must be positive")
        if abs(math.fsum(self.q) - 1.0) > NORMALIZATION_TOL:
            raise ParameterError("class fractions must sum to 1")
        if self.normalized:
            cap = math.fsum(m * x for m, x in zip(self.mu, self.q))
            if abs(cap - 1.0) > NORMALIZATION_TOL:
                raise ParameterError(f"sum(mu*q) = {cap!r}, expected 1")

    @property
    def mu_arr(self) -> np.ndarray:
        return np.asarray(self.mu, dtype=float)

    @property
    def q_arr(self) -> np.ndarray:
        return np.asarray(self.q, dtype=float)

    @property
    def R(self) -> Tuple[float, ...]:
        """Speed ratios relative to the slowest class."""
        return tuple(m / self.mu[-1] for m in self.mu)

    def with_lambda(self, lam: float) -> "SystemParams":
        return SystemParams(self.s, self.d, lam, self.mu, self.q, self.normalized)

    def to_dict(self) -> dict:
        return {"s": self.s, "d": self.d, "lambda": self.lam,
                "mu": list(self.mu), "q": list(self.q),
                "normalized": self.normalized}

    @classmethod
    def from_dict(cls, data: dict) -> "SystemParams":
        return cls(int(data["s"]), int(data["d"]), float(data["lambda"]),
                   tuple(data["mu"]), tuple(data["q"]),
                   bool(data.get("normalized", True)))


def normalized_params(s, d, lam, R, q) -> SystemParams:
    """Build parameters from speed ratios ``R`` (length s, last entry 1)."""
    R = [float(r) for r in R]
    q = [float(x) for x in q]
    mu_s = 1.0 / math.fsum(r * x for r, x in zip(R, q))
    return SystemParams(s, d, lam, tuple(r * mu_s for r in R), tuple(q))


# ---------------------------------------------------------------------------
# Query mixes
# ---------------------------------------------------------------------------

def _compositions(total: int, parts: int):
    # reverse-lexicographic: largest first coordinate first
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


@dataclass(frozen=True)
class MixSpace:
    s: int
    d: int
    mixes: Tuple[Mix, ...]
    index: Dict[Mix, int] = field(compare=False, repr=False)

    def __len__(self):
        return len(self.mixes)

    def __iter__(self):
        return iter(self.mixes)

    @property
    def counts(self) -> np.ndarray:
        """Array of shape (|D|, s) holding the mixes."""
        return np.array(self.mixes, dtype=np.int64).reshape(len(self.mixes), self.s)


_SPACE_CACHE: Dict[Tuple[int, int], MixSpace] = {}


def enumerate_mixes(s: int, d: int) -> MixSpace:
    """All compositions of ``d`` into ``s`` nonnegative parts.

    The order is reverse-lexicographic, so ``d * e_1`` comes first.
    """
    key = (s, d)
    if key not in _SPACE_CACHE:
        mixes = tuple(_compositions(d, s))
        _SPACE_CACHE[key] = MixSpace(s, d, mixes, {m: n for n, m in enumerate(mixes)})
    return _SPACE_CACHE[key]


def support(mix: Sequence[int]) -> Tuple[int, ...]:
    return tuple(i for i, c in enumerate(mix) if c > 0)


def fastest_queried(mix: Sequence[int]) -> int:
    for i, c in enumerate(mix):
        if c > 0:
            return i
    raise ValueError("empty query mix")


def gamma(j: int, mix: Sequence[int], variant: str = "compact") -> Mix:
    """Canonical representative of ``mix`` given fastest idle class ``j``.

    ``variant="filled"`` returns a genuine query mix: one query on every
    queried class no slower than ``j``, with all remaining queries placed on
    the fastest queried class.  ``variant="compact"`` drops the filler and
    returns only the 0/1 indicator of those classes; it is meant as a key and
    does not sum to ``d``.  Both induce the same equivalence classes.
    """
    s = len(mix)
    if not 0 <= j <= s:
        raise ValueError(f"j must lie in 0..{s}")
    ind = [1 if (c > 0 and i <= j) else 0 for i, c in enumerate(mix)]
    if variant == "compact":
        return tuple(ind)
    if variant != "filled":
        raise ValueError(f"unknown gamma variant {variant!r}")
    h = fastest_queried(mix)
    ind[h] += sum(mix) - sum(ind)
    return tuple(ind)


# ---------------------------------------------------------------------------
# Index sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IndexSets:
    """Pruned triples ``T``, pairs ``P`` and the busy-branch sets ``J_i``.

    ``T`` and ``P`` are ordered lists (first appearance while scanning the
    mix space).  ``members[pair]`` lists the classes ``i`` that form a triple
    with ``pair``; ``jset[(i, mix)]`` lists the ``j > i`` with
    ``(i, j, gamma(j, mix))`` in ``T``.
    """

    space: MixSpace
    variant: str
    T: Tuple[Triple, ...]
    P: Tuple[Pair, ...]
    t_index: Dict[Triple, int] = field(repr=False)
    p_index: Dict[Pair, int] = field(repr=False)
    members: Dict[Pair, Tuple[int, ...]] = field(repr=False)
    jset: Dict[Tuple[int, Mix], Tuple[int, ...]] = field(repr=False)

    def key(self, j: int, mix: Sequence[int]) -> Mix:
        return gamma(j, mix, self.variant)

    def pair_of_mix_j(self, j: int, mix: Sequence[int]) -> Pair:
        return (j, self.key(j, mix))


def admissible(i: int, j: int, mix: Sequence[int]) -> bool:
    """Pruning condition: i <= j, class i queried, class j queried if j <= s."""
    s = len(mix)
    return i <= j and mix[i] > 0 and (j == s or mix[j] > 0)


_INDEX_CACHE: Dict[Tuple[int, int, str], IndexSets] = {}


def build_index_sets(space: MixSpace, variant: str = "compact") -> IndexSets:
    ck = (space.s, space.d, variant)
    if ck in _INDEX_CACHE:
        return _INDEX_CACHE[ck]
    s = space.s
    t_index: Dict[Triple, int] = {}
    p_index: Dict[Pair, int] = {}
    members: Dict[Pair, List[int]] = {}
    jset: Dict[Tuple[int, Mix], Tuple[int, ...]] = {}
    for mix in space.mixes:
        for j in range(s + 1):
            key = gamma(j, mix, variant)
            for i in range(s):
                if admissible(i, j, mix):
                    t = (i, j, key)
                    if t not in t_index:
                        t_index[t] = len(t_index)
                        pair = (j, key)
                        if pair not in p_index:
                            p_index[pair] = len(p_index)
                            members[pair] = []
                        members[pair].append(i)
        for i in range(s):
            jset[(i, mix)] = tuple(
                j for j in range(i + 1, s + 1)
                if (i, j, gamma(j, mix, variant)) in t_index and admissible(i, j, mix))
    out = IndexSets(space, variant, tuple(t_index), tuple(p_index), t_index,
                    p_index, {k: tuple(v) for k, v in members.items()}, jset)
    _INDEX_CACHE[ck] = out
    return out


def mix_triples(mix: Sequence[int]) -> List[Tuple[int, int]]:
    """The per-mix set T(d) of (i, j) pairs passing the pruning."""
    s = len(mix)
    return [(i, j) for i in range(s) for j in range(i, s + 1) if admissible(i, j, mix)]


def mix_pairs(mix: Sequence[int]) -> List[int]:
    """The per-mix set P(d): queried classes plus the all-busy value s."""
    return list(support(mix)) + [len(mix)]


# ---------------------------------------------------------------------------
# Combinatorics
# ---------------------------------------------------------------------------

def psi(m: int, n: int) -> int:
    """Number of subsets of an n-set with at most m elements."""
    if m < 0 or n < 0:
        return 0
    return sum(math.comb(n, l) for l in range(min(m, n) + 1))


@dataclass(frozen=True)
class Cardinalities:
    n_mixes: int
    n_T: int
    n_P: int
    max_S: int
    avg_S: Fraction
    max_T: int
    avg_T: Fraction
    max_P: int
    avg_P: Fraction


def cardinalities(s: int, d: int) -> Cardinalities:
    """Closed-form sizes of the mix space and of the pruned index sets."""
    if s < 1 or d < 1:
        raise ValueError("s and d must be at least 1")
    if s + d > 30:
        raise OverflowError("s + d too large for 64-bit combinatorics")
    n_mixes = math.comb(s + d - 1, d)
    n_T = s * psi(d - 1, s - 1)
    for i in range(1, s + 1):
        n_T += psi(d - 1, i - 1)
        n_T += sum(psi(d - 2, j - 2) for j in range(i + 1, s + 1))
    n_P = psi(d, s) + sum(psi(d - 1, j - 1) for j in range(2, s + 1))
    avg_S = Fraction(s * d, s + d - 1)
    if s + d == 2:
        avg_T = Fraction(2)
    else:
        avg_T = Fraction(s * d * (s * d + 3 * s + 3 * d - 7),
                         2 * (s + d - 1) * (s + d - 2))
    return Cardinalities(
        n_mixes=n_mixes, n_T=n_T, n_P=n_P,
        max_S=min(s, d), avg_S=avg_S,
        max_T=min(s * s + 3 * s, d * d + 3 * d) // 2, avg_T=avg_T,
        max_P=min(s, d) + 1, avg_P=Fraction(s * d + s + d - 1, s + d - 1),
    )


# ---------------------------------------------------------------------------
# Problem sizes
# ---------------------------------------------------------------------------

FAMILIES = ("GEN", "IND", "IID", "DET", "SRC", "SFC", "QR")


@dataclass(frozen=True)
class ProblemSize:
    vars: int
    lec: int
    nec: int
    dim: int
    subproblems: int = 1

    @property
    def ubc(self) -> int:
        return self.nec // 2


@dataclass(frozen=True)
class SubproblemSizes:
    """Per-subproblem maximum and average sizes (DET family)."""

    max: ProblemSize
    avg: ProblemSize
    avg_exact: Tuple[Fraction, Fraction, Fraction, Fraction]
    subproblems: int


def _round_half_even(x: Fraction) -> int:
    # the published size tables round exact halves to the even neighbour
    return round(x)


def problem_size(family: str, s: int, d: int):
    """Variable and constraint counts of the optimization problem for a family.

    Returns a ``ProblemSize`` for single-problem families and for SFC (with
    ``subproblems = s``).  DET returns ``SubproblemSizes``.
    """
    family = family.upper()
    if family == "FIXEDQR":
        family = "QR"
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    space = enumerate_mixes(s, d)
    idx = build_index_sets(space)
    nT, nP, nD = len(idx.T), len(idx.P), len(space)

    def single(vars_, lec, nec):
        return ProblemSize(vars_, lec, nec, vars_ - lec - nec)

    if family == "GEN":
        return single(2 * s + nD + nT, nP + 1, 2 * s)
    if family == "IND":
        return single((d + 2) * s + nT, nP + d, 2 * s)
    if family == "IID":
        return single(3 * s + nT, nP + 1, 2 * s)
    if family == "QR":
        return single(2 * s + nT, nP, 2 * s)
    if family == "SRC":
        return single(3 * s, 1, 2 * s)
    if family == "SFC":
        return ProblemSize(2, 0, 2, 0, subproblems=s)
    # DET: one subproblem per mix
    rows = []
    for mix in space.mixes:
        nS = len(support(mix))
        tT = len(mix_triples(mix))
        tP = len(mix_pairs(mix))
        rows.append((2 * nS + tT, tP, 2 * nS, tT - tP))
    cols = list(zip(*rows))
    mx = ProblemSize(*(max(c) for c in cols), subproblems=nD)
    exact = tuple(Fraction(sum(c), nD) for c in cols)
    avg = ProblemSize(*(_round_half_even(x) for x in exact), subproblems=nD)
    return SubproblemSizes(mx, avg, exact, nD)

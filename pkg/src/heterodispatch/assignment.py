"""Class-and-idleness differentiated (CID) assignment tables.

A table assigns, for every pruned triple ``(i, j, key)``, the probability
that a job whose fastest idle queried class is ``j`` (``j == s``: all
queried servers busy) and whose canonical mix is ``key`` goes to a queried
class-``i`` server.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from .core import (IndexSets, Mix, Pair, SystemParams, Triple, admissible,
                   build_index_sets, enumerate_mixes)

ROW_TOL = 1e-10


class CidAssignment:
    """Immutable assignment table keyed by the pruned triples of ``index``."""

    def __init__(self, index: IndexSets, values):
        self.index = index
        vals = np.asarray(values, dtype=float).copy()
        if vals.shape != (len(index.T),):
            raise ValueError("one value per pruned triple is required")
        if np.any(vals < -ROW_TOL) or np.any(vals > 1 + ROW_TOL):
            raise ValueError("assignment probabilities must lie in [0, 1]")
        vals = np.clip(vals, 0.0, 1.0)
        for pair, members in index.members.items():
            tot = sum(vals[index.t_index[(i,) + pair]] for i in members)
            if abs(tot - 1.0) > ROW_TOL:
                raise ValueError(f"row {pair} sums to {tot}, expected 1")
        vals.flags.writeable = False
        self.values = vals

    @classmethod
    def from_mapping(cls, index: IndexSets, alpha: Mapping[Triple, float]):
        for t in alpha:
            if t not in index.t_index:
                raise KeyError(f"{t} is not a pruned triple")
        vals = [float(alpha.get(t, 0.0)) for t in index.T]
        return cls(index, vals)

    @classmethod
    def from_rows(cls, index: IndexSets, rows: Mapping[Pair, Sequence[float]]):
        """Build from one probability vector per pair, ordered like ``members``."""
        vals = np.zeros(len(index.T))
        for pair, members in index.members.items():
            row = rows[pair]
            for i, v in zip(members, row):
                vals[index.t_index[(i,) + pair]] = v
        return cls(index, vals)

    @property
    def s(self) -> int:
        return self.index.space.s

    def get(self, i: int, j: int, key: Mix) -> float:
        n = self.index.t_index.get((i, j, tuple(key)))
        return 0.0 if n is None else float(self.values[n])

    def lookup(self, i: int, j: int, mix: Sequence[int]) -> float:
        """alpha_i(j, mix): zero for pruned triples, else the table entry."""
        if not admissible(i, j, mix):
            return 0.0
        return self.get(i, j, self.index.key(j, mix))

    def as_dict(self) -> Dict[Triple, float]:
        return {t: float(v) for t, v in zip(self.index.T, self.values)}

    def __eq__(self, other):
        return (isinstance(other, CidAssignment) and self.index is other.index
                and np.array_equal(self.values, other.values))

    def __repr__(self):
        return f"CidAssignment(s={self.s}, d={self.index.space.d}, |T|={len(self.values)})"


def index_for(params: SystemParams, variant: str = "compact") -> IndexSets:
    return build_index_sets(enumerate_mixes(params.s, params.d), variant)


def fastest_idle(index: IndexSets) -> CidAssignment:
    """Send the job to the fastest idle queried class; if none is idle, to the
    fastest queried class."""
    rows = {}
    for (j, key), members in index.members.items():
        target = j if j < index.space.s else min(members)
        rows[(j, key)] = [1.0 if i == target else 0.0 for i in members]
    return CidAssignment.from_rows(index, rows)


def uniform_rows(index: IndexSets) -> CidAssignment:
    rows = {pair: [1.0 / len(m)] * len(m) for pair, m in index.members.items()}
    return CidAssignment.from_rows(index, rows)


def random_assignment(index: IndexSets, rng: np.random.Generator) -> CidAssignment:
    rows = {pair: rng.dirichlet(np.ones(len(m))) for pair, m in index.members.items()}
    return CidAssignment.from_rows(index, rows)


# ---------------------------------------------------------------------------
# Conditional assignment probabilities
# ---------------------------------------------------------------------------

def faster_all_busy(rho: Sequence[float], mix: Sequence[int], i: int) -> float:
    """b_i(mix): probability that every queried server faster than class i is busy."""
    out = 1.0
    for l in range(i):
        out *= rho[l] ** mix[l]
    return out


def r_idle(params: SystemParams, rho, assign: CidAssignment, i: int,
           mix: Sequence[int]) -> float:
    """Probability that a queried, idle class-i server receives the job."""
    di = mix[i]
    if di == 0:
        return 0.0
    r = rho[i]
    tail = sum(math.comb(di - 1, a - 1) * (1 - r) ** (a - 1) * r ** (di - a) / a
               for a in range(1, di + 1))
    return faster_all_busy(rho, mix, i) * assign.lookup(i, i, mix) * tail


def r_busy(params: SystemParams, rho, assign: CidAssignment, i: int,
           mix: Sequence[int]) -> float:
    """Probability that a queried, busy class-i server receives the job."""
    di = mix[i]
    s = len(mix)
    if di == 0 or rho[i] == 0:
        return 0.0
    total = 0.0
    for j in assign.index.jset[(i, tuple(mix))]:
        all_busy_j = 0.0 if j == s else rho[j] ** mix[j]
        total += faster_all_busy(rho, mix, j) * (1 - all_busy_j) * assign.lookup(i, j, mix)
    return total / (di * rho[i])


def oracle_assignment_prob(params: SystemParams, rho, assign: CidAssignment,
                           i: int, mix: Sequence[int], status: str) -> float:
    """Brute-force counterpart of ``r_idle`` / ``r_busy``.

    Enumerates every idle/busy configuration of the other ``d - 1`` queried
    servers (independent, class-l server busy w.p. ``rho[l]``), determines the
    fastest idle class, applies the table and uniform selection within the
    chosen class, and returns the chance that the tagged class-i server is
    picked.
    """
    if status not in ("idle", "busy"):
        raise ValueError("status must be 'idle' or 'busy'")
    mix = tuple(mix)
    s = len(mix)
    d = sum(mix)
    if d > 8:
        raise ValueError("oracle limited to d <= 8")
    if mix[i] == 0:
        return 0.0
    others = []
    for l in range(s):
        others.extend([l] * (mix[l] - (1 if l == i else 0)))
    tagged_busy = status == "busy"
    total = 0.0
    for states in itertools.product((False, True), repeat=len(others)):
        w = 1.0
        idle_count = [0] * s
        busy_count = [0] * s
        for l, busy in zip(others, states):
            w *= rho[l] if busy else (1 - rho[l])
            if busy:
                busy_count[l] += 1
            else:
                idle_count[l] += 1
        if w == 0.0:
            continue
        if tagged_busy:
            busy_count[i] += 1
        else:
            idle_count[i] += 1
        J = next((l for l in range(s) if idle_count[l] > 0), s)
        a = assign.lookup(i, J, mix)
        if a == 0.0:
            continue
        if i == J:
            pick = 0.0 if tagged_busy else 1.0 / idle_count[i]
        else:
            # class i is faster than J (or nobody is idle): all of it is busy
            pick = 1.0 / busy_count[i] if tagged_busy else 0.0
        total += w * a * pick
    return total

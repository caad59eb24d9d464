"""Repeating the same broadcast K times, each run independent of the others."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .markov import OutcomeDistribution, cover_probability, hitting_probability

SUM_TOL = 1e-9


@dataclass(frozen=True)
class MultiBroadcastResult:
    k: int
    cover_probability_k: float
    per_node_hitting_k: dict[int, float]


def miss_probabilities(dist: OutcomeDistribution) -> np.ndarray:
    """``m[A]``: probability that a single run covers no node of ``A`` (bitmask over non-sink nodes).

    ``m[A]`` is the sum of masses over covered sets inside the complement of ``A``,
    obtained with a subset-sum transform.
    """
    f = dist.as_bitmask_array()
    n = len(dist.non_sink)
    for b in range(n):
        bit = 1 << b
        idx = np.arange(f.size)
        hi = idx[(idx & bit) != 0]
        f[hi] += f[hi ^ bit]
    full = f.size - 1
    return f[full ^ np.arange(f.size)]


def k_cover_probability(dist: OutcomeDistribution, k: int) -> float:
    """Probability that every non-sink node is covered in at least one of ``k`` runs.

    Inclusion-exclusion over the sets of nodes missed by all runs:
    ``sum_A (-1)^|A| m(A)^k``. The empty-set term is the sure event and is
    taken as exactly 1 rather than the total mass raised to ``k``, which
    would drift by ``k`` ulps; the rest is summed exactly.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k == 1:
        return cover_probability(dist)
    m = miss_probabilities(dist)
    sizes = np.array([bin(a).count("1") for a in range(m.size)])
    signs = np.where(sizes % 2 == 0, 1.0, -1.0)
    total = math.fsum([1.0, *(signs[1:] * m[1:] ** k)])
    if total < -SUM_TOL or total > 1.0 + SUM_TOL:
        raise ArithmeticError(f"inclusion-exclusion sum {total} left [0, 1]")
    return min(max(total, 0.0), 1.0)


def multibroadcast(dist: OutcomeDistribution, k: int) -> MultiBroadcastResult:
    hits = {j: 1.0 - (1.0 - hitting_probability(dist, j)) ** k for j in dist.non_sink}
    return MultiBroadcastResult(k, k_cover_probability(dist, k), hits)


def abaque(dists: Mapping[float, OutcomeDistribution], k_values: Sequence[int]) -> dict[tuple[float, int], float]:
    """Cover probability on the full ``(PT, K)`` grid."""
    if not dists:
        raise ValueError("need at least one distribution")
    return {(pt, k): k_cover_probability(d, k) for pt, d in sorted(dists.items()) for k in k_values}


def min_k_for_threshold(table: Mapping[tuple[float, int], float], threshold: float) -> dict[float, int | None]:
    """Smallest K per PT whose cover probability reaches ``threshold`` (``None`` if none does)."""
    out: dict[float, int | None] = {}
    for (pt, k), p in sorted(table.items()):
        out.setdefault(pt, None)
        if p >= threshold and (out[pt] is None or k < out[pt]):
            out[pt] = k
    return out


def abaque_rows(table: Mapping[tuple[float, int], float]) -> list[dict]:
    return [{"pt_dbm": pt, "k": k, "cover_probability": p} for (pt, k), p in sorted(table.items())]


def abaque_csv(table: Mapping[tuple[float, int], float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pt_dbm", "k", "cover_probability"])
    for row in abaque_rows(table):
        w.writerow([repr(row["pt_dbm"]), row["k"], repr(row["cover_probability"])])
    return buf.getvalue()


def abaque_json(table: Mapping[tuple[float, int], float]) -> str:
    return json.dumps(abaque_rows(table))

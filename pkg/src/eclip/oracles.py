"""Slow, obviously-correct reference computations used to cross-check the fast paths.

Nothing here shares code with the routines it checks.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np


def naive_matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def loop_similarity(x, y) -> np.ndarray:
    n = len(x)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = math.fsum(float(p) * float(q) for p, q in zip(x[i], y[j]))
    return out


def hard_clip_loss(sim, tau: float) -> float:
    """Plain CLIP loss: cross-entropy of each row/column against its diagonal."""
    n = len(sim)
    total_rows = 0.0
    total_cols = 0.0
    for i in range(n):
        row = [sim[i][j] / tau for j in range(n)]
        m = max(row)
        total_rows += -(row[i] - m - math.log(math.fsum(math.exp(v - m) for v in row)))
        col = [sim[j][i] / tau for j in range(n)]
        m = max(col)
        total_cols += -(col[i] - m - math.log(math.fsum(math.exp(v - m) for v in col)))
    return 0.5 * (total_rows / n + total_cols / n)


def rational_soft_labels(ids) -> list[list[Fraction]]:
    n = len(ids)
    return [[Fraction(1, sum(1 for k in ids if k == ids[i])) if ids[i] == ids[j] else Fraction(0) for j in range(n)] for i in range(n)]


def set_partitions(n: int):
    """All partitions of ``n`` points as restricted-growth label tuples."""
    if n == 0:
        yield ()
        return

    def rec(prefix, top):
        if len(prefix) == n:
            yield tuple(prefix)
            return
        for v in range(top + 2):
            yield from rec(prefix + [v], max(top, v))

    yield from rec([0], 0)


def brute_force_acc(assign, gold) -> float:
    """Best matched fraction over every injective cluster -> label mapping."""
    clusters = sorted(set(assign))
    labels = sorted(set(gold))
    n = len(gold)
    best = 0
    size = max(len(clusters), len(labels))
    padded_labels = labels + [None] * (size - len(labels))
    for perm in itertools.permutations(padded_labels, len(clusters)):
        mapping = dict(zip(clusters, perm))
        hits = sum(1 for a, g in zip(assign, gold) if mapping[a] == g)
        best = max(best, hits)
    return best / n


def pair_counting_ari(assign, gold) -> float:
    """ARI from the four pair-agreement counts over all point pairs."""
    a = b = c = d = 0
    n = len(gold)
    for i in range(n):
        for j in range(i + 1, n):
            same_u = assign[i] == assign[j]
            same_v = gold[i] == gold[j]
            if same_u and same_v:
                a += 1
            elif same_u:
                b += 1
            elif same_v:
                c += 1
            else:
                d += 1
    den = (a + b) * (b + d) + (a + c) * (c + d)
    if den == 0:
        return 1.0
    return 2 * (a * d - b * c) / den


def max_relative_discrepancy(got: dict, ref: dict, floor: float = 1e-6) -> float:
    """Max over tensors of ``max|got - ref| / scale``.

    ``scale`` is the tensor's own ``max|ref|``, but never below ``floor`` times
    the largest reference entry overall: a tensor whose exact gradient is zero
    holds only roundoff, and roundoff divided by roundoff means nothing.
    """
    overall = max((float(np.max(np.abs(r))) for r in ref.values() if np.size(r)), default=0.0)
    worst = 0.0
    for name, r in ref.items():
        r = np.asarray(r)
        if not r.size:
            continue
        g = np.asarray(got[name])
        scale = max(float(np.max(np.abs(r))), floor * overall)
        diff = float(np.max(np.abs(g - r)))
        worst = max(worst, diff / scale if scale > 0 else diff)
    return worst

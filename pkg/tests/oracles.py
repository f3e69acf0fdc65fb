"""Slow, obviously-correct reference implementations used as test oracles."""

import numpy as np


def sq(p, q):
    dx = p[0] - q[0]
    dy = p[1] - q[1]
    dz = p[2] - q[2]
    return dx * dx + dy * dy + dz * dz


def fps(coords, m, seed_rule="lexicographic"):
    pts = [tuple(float(c) for c in row) for row in coords]
    if seed_rule == "lexicographic":
        first = min(range(len(pts)), key=lambda i: (pts[i], i))
    else:
        first = 0
    chosen = [first]
    while len(chosen) < m:
        best, best_d = None, -1.0
        for i, p in enumerate(pts):
            d = min(sq(p, pts[c]) for c in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def knn(query, support, k):
    sup = [tuple(float(c) for c in row) for row in support]
    out = []
    for q in query:
        q = tuple(float(c) for c in q)
        out.append(sorted(range(len(sup)), key=lambda j: (sq(sup[j], q), j))[:k])
    return out


def lgp(center, neighbors, alpha, beta):
    """Max over K of alpha*(nb - c) + beta, first slot winning ties, with loops."""
    m, k, d = neighbors.shape
    pooled = np.empty((m, d))
    arg = np.empty((m, d), dtype=int)
    for g in range(m):
        for ch in range(d):
            best, best_j = None, None
            for j in range(k):
                e = alpha[ch] * (neighbors[g, j, ch] - center[g, ch]) + beta[ch]
                if best is None or e > best:
                    best, best_j = e, j
            pooled[g, ch] = best
            arg[g, ch] = best_j
    return pooled, arg


def votes(arg, neighbor_idx, n):
    out = [0] * n
    for g, row in enumerate(arg):
        for slot in row:
            out[neighbor_idx[g][slot]] += 1
    return out

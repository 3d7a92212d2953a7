"""Brute-force reference implementations used as test oracles.

Each function recomputes every candidate distance from scratch at every step,
so it shares no update logic with the production engines.
"""

import itertools

import numpy as np


def _pick(cands):
    # cands: list of (distance, a, b) with a < b; min gives the tie rule
    return min(cands)


def brute_complete(dist, adj, target=1):
    """Adjacency-constrained complete linkage; returns list of (left, right, height)."""
    dist = np.asarray(dist, dtype=float)
    adj = np.asarray(adj, dtype=bool)
    n = dist.shape[0]
    clusters = {i: [i] for i in range(n)}
    merges = []
    nxt = n
    while len(clusters) > target:
        cands = []
        for a, b in itertools.combinations(sorted(clusters), 2):
            ma, mb = clusters[a], clusters[b]
            if not any(adj[i, j] for i in ma for j in mb):
                continue
            cands.append((max(dist[i, j] for i in ma for j in mb), a, b))
        if not cands:
            raise RuntimeError("stuck")
        h, a, b = _pick(cands)
        merges.append((a, b, h))
        clusters[nxt] = clusters.pop(a) + clusters.pop(b)
        nxt += 1
    return merges


def brute_average(sim):
    """UPGMA on 1 - S run to completion; returns list of (left, right, height)."""
    sim = np.asarray(sim, dtype=float)
    n = sim.shape[0]
    clusters = {i: [i] for i in range(n)}
    merges = []
    nxt = n
    while len(clusters) > 1:
        cands = []
        for a, b in itertools.combinations(sorted(clusters), 2):
            ma, mb = clusters[a], clusters[b]
            total = sum(1.0 - sim[i, j] for i in ma for j in mb)
            cands.append((total / (len(ma) * len(mb)), a, b))
        h, a, b = _pick(cands)
        merges.append((a, b, h))
        clusters[nxt] = clusters.pop(a) + clusters.pop(b)
        nxt += 1
    return merges


def random_instance(rng, n_max=8, grid=64):
    """Symmetric dyadic-grid instance: (distances, adjacency, similarity, rlf)."""
    n = int(rng.integers(1, n_max + 1))
    d = rng.integers(0, 12, size=(n, n)) / 4.0
    d = np.triu(d, 1)
    d = d + d.T
    adj = np.zeros((n, n), dtype=bool)
    order = rng.permutation(n)
    for k in range(1, n):  # random spanning tree keeps the graph connected
        j = order[rng.integers(0, k)]
        adj[order[k], j] = adj[j, order[k]] = True
    extra = np.triu(rng.random((n, n)) < 0.3, 1)
    adj |= extra | extra.T
    np.fill_diagonal(adj, False)
    s = rng.integers(0, grid + 1, size=(n, n)) / grid
    s[rng.random((n, n)) < 0.35] = 0.0
    s = np.triu(s, 1)
    s = s + s.T
    rlf = rng.integers(0, 20, size=n)
    return d, adj, s, rlf

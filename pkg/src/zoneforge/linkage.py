"""Agglomerative clustering engines used by the delineation.

Two engines, both deterministic under the tie rule "among equal-distance
candidates merge the pair with the lexicographically smallest
(smaller id, larger id)":

* :func:`constrained_complete_linkage` -- complete linkage where only
  clusters with at least one adjacent member pair may merge.
* :func:`average_linkage` -- UPGMA on ``D = 1 - S`` for a sparse similarity
  ``S``; pairs without any similarity mass sit at distance exactly 1.

Cluster ids follow the usual convention: leaves are ``0..n-1`` and the
cluster created by merge step ``s`` gets id ``n + s``.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import NumericalError


@dataclass(frozen=True)
class Merge:
    step: int
    left: int
    right: int
    height: float


@dataclass(frozen=True)
class Dendrogram:
    n_leaves: int
    merges: tuple

    def __len__(self):
        return len(self.merges)

    @property
    def heights(self) -> np.ndarray:
        return np.array([m.height for m in self.merges], dtype=np.float64)

    def labels_after(self, n_merges: int) -> np.ndarray:
        """Leaf labels after replaying the first ``n_merges`` merges.

        Labels are ``0..k-1`` numbered by the smallest leaf in each cluster.
        """
        if not 0 <= n_merges <= len(self.merges):
            raise ValueError(f"cannot replay {n_merges} of {len(self.merges)} merges")
        parent = np.arange(self.n_leaves + n_merges)
        for m in self.merges[:n_merges]:
            new = self.n_leaves + m.step
            parent[m.left] = new
            parent[m.right] = new
        # resolve roots from the top down: ids grow with merge order
        root = parent.copy()
        for c in range(len(root) - 1, -1, -1):
            root[c] = root[root[c]] if root[c] != c else c
        leaf_roots = root[: self.n_leaves]
        _, first = np.unique(leaf_roots, return_index=True)
        order = np.argsort(first)
        mapping = {leaf_roots[first[k]]: rank for rank, k in enumerate(order)}
        return np.array([mapping[r] for r in leaf_roots], dtype=np.int64)

    def cut_count(self, k: int) -> np.ndarray:
        if not 1 <= k <= self.n_leaves:
            raise ValueError(f"cluster count {k} outside 1..{self.n_leaves}")
        need = self.n_leaves - k
        if need > len(self.merges):
            raise ValueError(f"dendrogram stops at {self.n_leaves - len(self.merges)} clusters")
        return self.labels_after(need)

    def cut_threshold(self, c: float) -> np.ndarray:
        """Replay merges while their height is strictly below ``c``."""
        h = self.heights
        return self.labels_after(int(np.searchsorted(h, c, side="left")))

    def count_below(self, c: float) -> int:
        return self.n_leaves - int(np.searchsorted(self.heights, c, side="left"))


class DenseDissimilarity:
    """Pairwise values read from a dense matrix."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=np.float64)

    def pairs(self, i, j):
        return self.matrix[i, j]

    def block(self, a, b):
        return self.matrix[np.ix_(a, b)]


def constrained_complete_linkage(dissim, adjacency, target: int = 1) -> Dendrogram:
    """Complete linkage restricted to adjacent clusters.

    Parameters
    ----------
    dissim : object
        Provides ``pairs(i, j)`` (vectorised element lookup) and
        ``block(a, b)`` (sub-matrix for member lists).
    adjacency : sparse matrix
        Symmetric leaf adjacency; two clusters are mergeable when any member
        pair is adjacent.
    target : int
        Stop once this many clusters remain.

    Raises
    ------
    NumericalError
        If no adjacent pair is left before ``target`` is reached.
    """
    adj = sparse.csr_matrix(adjacency)
    n = adj.shape[0]
    if not 1 <= target <= n:
        raise ValueError(f"target {target} outside 1..{n}")
    upper = sparse.triu(adj, k=1).tocoo()
    ei, ej = upper.row.astype(np.int64), upper.col.astype(np.int64)
    vals = np.asarray(dissim.pairs(ei, ej), dtype=np.float64)

    members = {i: [i] for i in range(n)}
    nbr = {i: {} for i in range(n)}
    heap = []
    for a, b, v in zip(ei.tolist(), ej.tolist(), vals.tolist()):
        nbr[a][b] = v
        nbr[b][a] = v
        heap.append((v, a, b))
    heapq.heapify(heap)

    merges = []
    active = n
    step = 0
    while active > target:
        while heap and (heap[0][1] not in members or heap[0][2] not in members):
            heapq.heappop(heap)
        if not heap:
            raise NumericalError(
                f"no adjacent merge available: stuck at {active} clusters (target {target})"
            )
        h, a, b = heapq.heappop(heap)
        c = n + step
        merges.append(Merge(step, a, b, h))
        ma, mb = members.pop(a), members.pop(b)
        na, nb = nbr.pop(a), nbr.pop(b)
        na.pop(b, None)
        nb.pop(a, None)
        merged = {}
        for other in set(na) | set(nb):
            da = na.get(other)
            db = nb.get(other)
            if da is None:
                da = float(np.max(dissim.block(ma, members[other])))
            if db is None:
                db = float(np.max(dissim.block(mb, members[other])))
            d = da if da >= db else db
            merged[other] = d
            on = nbr[other]
            on.pop(a, None)
            on.pop(b, None)
            on[c] = d
            heapq.heappush(heap, (d, other, c))
        members[c] = ma + mb
        nbr[c] = merged
        active -= 1
        step += 1
    return Dendrogram(n, tuple(merges))


def average_linkage(similarity) -> Dendrogram:
    """UPGMA on ``D = 1 - S`` run to completion (``n - 1`` merges).

    ``similarity`` is a symmetric sparse (or dense) matrix with values in
    ``[0, 1]``; the diagonal is ignored. The between-cluster distance is
    ``(|A||B| - sum_S(A, B)) / (|A||B|)`` where ``sum_S`` is updated exactly
    by ``sum_S(A u B, C) = sum_S(A, C) + sum_S(B, C)``.
    """
    sim = sparse.csr_matrix(similarity, dtype=np.float64)
    n = sim.shape[0]
    upper = sparse.triu(sim, k=1).tocoo()
    size = {i: 1 for i in range(n)}
    nbr = {i: {} for i in range(n)}
    heap = []
    for a, b, s in zip(upper.row.tolist(), upper.col.tolist(), upper.data.tolist()):
        if s == 0.0:
            continue
        nbr[a][b] = s
        nbr[b][a] = s
        heap.append(((1.0 - s) / 1.0, a, b))
    heapq.heapify(heap)
    ids = list(range(n))  # min-heap of active ids for the distance-1 phase

    merges = []
    for step in range(n - 1):
        while heap and (heap[0][1] not in size or heap[0][2] not in size):
            heapq.heappop(heap)
        if heap and heap[0][0] < 1.0:
            h, a, b = heapq.heappop(heap)
        else:
            while ids[0] not in size:
                heapq.heappop(ids)
            a = heapq.heappop(ids)
            while ids[0] not in size:
                heapq.heappop(ids)
            b = heapq.heappop(ids)
            h = 1.0
        c = n + step
        merges.append(Merge(step, a, b, h))
        sa, sb = size.pop(a), size.pop(b)
        na, nb = nbr.pop(a), nbr.pop(b)
        na.pop(b, None)
        nb.pop(a, None)
        if len(na) < len(nb):
            na, nb = nb, na
        merged = dict(na)
        for other, s in nb.items():
            merged[other] = merged.get(other, 0.0) + s
        sc = sa + sb
        for other, s in merged.items():
            on = nbr[other]
            on.pop(a, None)
            on.pop(b, None)
            on[c] = s
            denom = float(sc * size[other])
            heapq.heappush(heap, ((denom - s) / denom, other, c))
        size[c] = sc
        nbr[c] = merged
        heapq.heappush(ids, c)
    return Dendrogram(n, tuple(merges))

"""Two-stage delineation of local labour markets and partition metrics.

Stage 1 merges small neighbouring municipalities into municipality regions
with adjacency-constrained complete linkage on the fusion coefficient
``d_ij**2 * (rlf_i + rlf_j)``. Stage 2 groups regions into labour markets with
average linkage on ``1 - S_ij`` where ``S_ij = (P_ij + P_ji) / min(rlf_i, rlf_j)``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from scipy import sparse

from .errors import ValidationError
from .geo import Geography
from .linkage import Dendrogram, average_linkage, constrained_complete_linkage

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RegionPartition:
    """Total mapping of municipalities (by position) to regions.

    ``labels[i]`` is the region index of municipality ``i``; ``region_ids``
    names each index. ``kind`` is ``"regions"`` for stage-1 output and
    ``"markets"`` for labour markets.
    """

    municipality_ids: tuple
    labels: np.ndarray
    region_ids: tuple
    kind: str = "markets"

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if labels.shape != (len(self.municipality_ids),):
            raise ValidationError("partition must label every municipality")
        k = len(self.region_ids)
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ValidationError("partition label out of range")
        if np.unique(labels).size != k:
            raise ValidationError("partition has empty regions")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_labels(cls, municipality_ids, labels, kind="markets", prefix=None):
        """Relabel arbitrary integer labels by first appearance."""
        labels = np.asarray(labels)
        _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
        order = np.argsort(first)
        rank = np.empty_like(order)
        rank[order] = np.arange(order.size)
        dense = rank[inv]
        prefix = prefix or ("R" if kind == "regions" else "M")
        width = max(3, len(str(order.size)))
        region_ids = tuple(f"{prefix}{k + 1:0{width}d}" for k in range(order.size))
        return cls(tuple(municipality_ids), dense, region_ids, kind)

    @classmethod
    def from_mapping(cls, municipality_ids, mapping, kind="markets"):
        """Build from ``{municipality_id: region_id}``; region order by first appearance."""
        region_index = {}
        labels = []
        for m in municipality_ids:
            try:
                r = mapping[m]
            except KeyError:
                raise ValidationError(f"partition does not cover municipality {m!r}") from None
            labels.append(region_index.setdefault(r, len(region_index)))
        return cls(tuple(municipality_ids), np.array(labels, dtype=np.int64),
                   tuple(region_index), kind)

    @property
    def n_regions(self) -> int:
        return len(self.region_ids)

    def members(self, region: int) -> np.ndarray:
        return np.flatnonzero(self.labels == region)

    def roster(self) -> dict:
        return {rid: [self.municipality_ids[i] for i in self.members(k)]
                for k, rid in enumerate(self.region_ids)}

    def mapping(self) -> dict:
        return {m: self.region_ids[k] for m, k in zip(self.municipality_ids, self.labels)}

    def indicator(self) -> sparse.csr_matrix:
        n = self.labels.size
        return sparse.csr_matrix((np.ones(n), (np.arange(n), self.labels)),
                                 shape=(n, self.n_regions))

    def compose(self, upper: "RegionPartition", kind="markets") -> "RegionPartition":
        """Map municipalities through this partition and then ``upper`` (over regions)."""
        if len(upper.municipality_ids) != self.n_regions:
            raise ValidationError("upper partition must label every region")
        return RegionPartition.from_labels(self.municipality_ids, upper.labels[self.labels], kind=kind)

    def is_coarsening_of(self, finer: "RegionPartition") -> bool:
        pairs = set(zip(finer.labels.tolist(), self.labels.tolist()))
        return len(pairs) == finer.n_regions


class FusionDissimilarity:
    """``F_ij = d_ij**2 * (rlf_i + rlf_j)`` evaluated on demand."""

    def __init__(self, distances, rlf):
        self.d = np.asarray(distances, dtype=np.float64)
        self.r = np.asarray(rlf, dtype=np.int64)

    def pairs(self, i, j):
        d = self.d[i, j]
        return d ** 2 * (self.r[i] + self.r[j])

    def block(self, a, b):
        d = self.d[np.ix_(a, b)]
        return d ** 2 * (self.r[a][:, None] + self.r[b][None, :])


def fusion_coefficients(distances, rlf) -> np.ndarray:
    """Dense matrix of fusion coefficients."""
    d = np.asarray(distances, dtype=np.float64)
    r = np.asarray(rlf, dtype=np.int64)
    if d.shape != (r.size, r.size):
        raise ValidationError("distance matrix and labour forces differ in size")
    return d ** 2 * (r[:, None] + r[None, :])


def pre_aggregate(geo: Geography, target_regions: int) -> tuple[RegionPartition, Dendrogram]:
    """Stage 1: merge adjacent municipalities until ``target_regions`` remain."""
    if not 1 <= target_regions <= geo.n:
        raise ValidationError(f"target_regions must be in 1..{geo.n}")
    dendro = constrained_complete_linkage(FusionDissimilarity(geo.distances, geo.rlf),
                                          geo.adjacency, target_regions)
    labels = dendro.labels_after(len(dendro))
    return RegionPartition.from_labels(geo.ids, labels, kind="regions"), dendro


def region_flows(partition: RegionPartition, flows) -> sparse.csr_matrix:
    ind = partition.indicator()
    mat = sparse.csr_matrix(flows, dtype=np.float64)
    out = (ind.T @ mat @ ind).tocsr()
    out.data = np.rint(out.data)
    return out.astype(np.int64)


@dataclass
class Similarity:
    matrix: sparse.csr_matrix
    rlf: np.ndarray
    warnings: list = field(default_factory=list)


def commuting_similarity(partition: RegionPartition, flows) -> Similarity:
    """Proportional commuting measure between regions, clamped to [0, 1].

    Regions with zero resident labour force get ``S = 0`` against all others
    and are listed in ``warnings``.
    """
    rf = region_flows(partition, flows)
    rlf = np.asarray(rf.sum(axis=1)).ravel()
    both = (rf + rf.T).tocoo()
    off = both.row != both.col
    r, c, v = both.row[off], both.col[off], both.data[off].astype(np.float64)
    denom = np.minimum(rlf[r], rlf[c]).astype(np.float64)
    ok = (denom > 0) & (v > 0)
    s = np.zeros_like(v)
    s[ok] = np.minimum(v[ok] / denom[ok], 1.0)
    k = partition.n_regions
    mat = sparse.csr_matrix((s[ok], (r[ok], c[ok])), shape=(k, k))
    warnings = [f"region {partition.region_ids[i]} has zero resident labour force"
                for i in np.flatnonzero(rlf == 0)]
    return Similarity(mat, rlf.astype(np.int64), warnings)


@dataclass(frozen=True)
class Stop:
    """Stopping rule for stage 2: a distance threshold or a cluster count."""

    threshold: float | None = None
    count: int | None = None

    def __post_init__(self):
        if (self.threshold is None) == (self.count is None):
            raise ValidationError("stop needs exactly one of threshold or count")
        if self.threshold is not None and not 0.0 < self.threshold <= 1.0:
            raise ValidationError("threshold must lie in (0, 1]")
        if self.count is not None and self.count < 1:
            raise ValidationError("count must be at least 1")

    def label(self) -> str:
        return f"{self.threshold:g}" if self.threshold is not None else f"k={self.count}"


def cut(dendro: Dendrogram, stop: Stop) -> np.ndarray:
    if stop.threshold is not None:
        return dendro.cut_threshold(stop.threshold)
    if stop.count > dendro.n_leaves:
        raise ValidationError(f"count {stop.count} exceeds {dendro.n_leaves} regions")
    return dendro.cut_count(stop.count)


def cluster_markets(similarity, stop: Stop, region_ids: Sequence | None = None):
    """Stage 2: average linkage on ``1 - S``.

    Returns ``(RegionPartition over regions, Dendrogram)``; the dendrogram is
    complete, so it can be re-cut at any count or threshold.
    """
    mat = similarity.matrix if isinstance(similarity, Similarity) else similarity
    dendro = average_linkage(mat)
    labels = cut(dendro, stop)
    ids = tuple(region_ids) if region_ids is not None else tuple(range(dendro.n_leaves))
    return RegionPartition.from_labels(ids, labels, kind="markets"), dendro


@dataclass
class Delineation:
    regions: RegionPartition
    region_dendrogram: Dendrogram
    similarity: Similarity
    market_dendrogram: Dendrogram
    markets: RegionPartition  # over municipalities

    def recut(self, stop: Stop) -> RegionPartition:
        upper = RegionPartition.from_labels(self.regions.region_ids, cut(self.market_dendrogram, stop))
        return self.regions.compose(upper)


def delineate(geo: Geography, stage1_target: int, stop: Stop) -> Delineation:
    regions, d1 = pre_aggregate(geo, stage1_target)
    sim = commuting_similarity(regions, geo.flows)
    for w in sim.warnings:
        log.warning(w)
    upper, d2 = cluster_markets(sim, stop, regions.region_ids)
    return Delineation(regions, d1, sim, d2, regions.compose(upper))


@dataclass
class SelfContainment:
    cr: float
    esc: np.ndarray  # per region, NaN where the region has no residents
    mean: float
    sd: float
    min: float
    max: float
    excluded: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"cr": self.cr, "esc_mean": self.mean, "esc_sd": self.sd,
                "esc_min": self.min, "esc_max": self.max}


def _flows_by_region(partition: RegionPartition, flows):
    mat = sparse.csr_matrix(flows)
    if mat.shape != (len(partition.municipality_ids),) * 2:
        raise ValidationError("flow matrix does not match the partition")
    return region_flows(partition, mat)


def commuter_ratio(partition: RegionPartition, flows) -> float:
    """Cross-market commuters as a percentage of the total labour force."""
    rf = _flows_by_region(partition, flows)
    total = int(rf.sum())
    if total == 0:
        raise ValidationError("total labour force is zero")
    within = int(rf.diagonal().sum())
    return 100.0 * (total - within) / total


def esc_stats(partition: RegionPartition, flows, weighted: bool = False) -> SelfContainment:
    """Employment self-containment per region and its summary.

    The summary is unweighted by default; ``weighted=True`` weights regions by
    resident labour force. Regions with zero residents are excluded.
    """
    rf = _flows_by_region(partition, flows)
    rlf = np.asarray(rf.sum(axis=1)).ravel().astype(np.float64)
    within = rf.diagonal().astype(np.float64)
    esc = np.full(rlf.size, np.nan)
    ok = rlf > 0
    esc[ok] = 100.0 * within[ok] / rlf[ok]
    excluded = [partition.region_ids[i] for i in np.flatnonzero(~ok)]
    vals = esc[ok]
    if vals.size == 0:
        raise ValidationError("no region with a positive resident labour force")
    if weighted:
        w = rlf[ok] / rlf[ok].sum()
        mean = float(np.sum(w * vals))
        sd = float(np.sqrt(np.sum(w * (vals - mean) ** 2)))
    else:
        mean = float(vals.mean())
        sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    total = rf.sum()
    cr = 100.0 * (total - within.sum()) / total
    return SelfContainment(float(cr), esc, mean, sd, float(vals.min()), float(vals.max()), excluded)


@dataclass
class Consistency:
    score: float
    n_used: int
    n_excluded: int


def temporal_consistency(p_t: RegionPartition, p_t2: RegionPartition, weights=None,
                         scope: str = "all", sizes=None) -> Consistency:
    """Share of a municipality's later co-members that were co-members before.

    For each municipality ``m`` the score is ``|C_t(m) & C_t2(m)| / |C_t2(m)|``
    over co-members excluding ``m`` (weighted by ``weights`` when given), then
    averaged. ``scope="centers"`` averages only over the largest municipality
    of each market in ``p_t2`` (by ``sizes``, defaulting to ``weights``).
    Municipalities alone in their ``p_t2`` market are excluded.
    """
    if tuple(p_t.municipality_ids) != tuple(p_t2.municipality_ids):
        raise ValidationError("partitions cover different municipalities")
    a, b = p_t.labels, p_t2.labels
    n = a.size
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValidationError("weights must have one entry per municipality")
    key = a * p_t2.n_regions + b
    inter = np.bincount(key, weights=w, minlength=p_t.n_regions * p_t2.n_regions)[key] - w
    denom = np.bincount(b, weights=w, minlength=p_t2.n_regions)[b] - w

    if scope == "all":
        use = np.arange(n)
    elif scope == "centers":
        size = sizes if sizes is not None else weights
        if size is None:
            raise ValidationError("scope='centers' needs municipality sizes")
        size = np.asarray(size, dtype=np.float64)
        order = np.lexsort((np.arange(n), -size, b))
        first = np.ones(n, dtype=bool)
        first[1:] = b[order][1:] != b[order][:-1]
        use = np.sort(order[first])
    else:
        raise ValidationError(f"unknown scope {scope!r}")
    ok = denom[use] > 0
    used = use[ok]
    if used.size == 0:
        return Consistency(float("nan"), 0, int(use.size))
    score = float(np.mean(inter[used] / denom[used]))
    return Consistency(score, int(used.size), int(use.size - used.size))


def definition_table(geo: Geography, stage1_counts: Iterable[int], stops: Iterable[float],
                     match_counts: bool = True) -> pd.DataFrame:
    """One row per (stage-1 size, stop value).

    With ``match_counts`` the first stage-1 size is cut at the thresholds and
    the resulting market counts are reused as stopping rule for the other
    sizes, so every size yields the same number of markets per row.
    """
    stage1_counts = list(stage1_counts)
    stops = sorted(float(s) for s in stops)
    rows = []
    counts = None
    for size in stage1_counts:
        regions, _ = pre_aggregate(geo, size)
        sim = commuting_similarity(regions, geo.flows)
        dendro = average_linkage(sim.matrix)
        found = []
        for k, c in enumerate(stops):
            if counts is not None and match_counts:
                labels = dendro.cut_count(min(counts[k], dendro.n_leaves))
            else:
                labels = dendro.cut_threshold(c)
            upper = RegionPartition.from_labels(regions.region_ids, labels)
            markets = regions.compose(upper)
            sc = esc_stats(markets, geo.flows)
            found.append(markets.n_regions)
            mrlf = np.bincount(markets.labels, weights=geo.rlf.astype(np.float64))
            rows.append({
                "stage1_regions": size, "cut_off": c, "n_markets": markets.n_regions,
                "rlf_mean": float(mrlf.mean()), "cr": sc.cr, "esc_mean": sc.mean,
                "esc_sd": sc.sd, "esc_min": sc.min, "esc_max": sc.max,
            })
        if counts is None:
            counts = found
    return pd.DataFrame(rows)


def write_partition(directory, partition: RegionPartition, dendrogram: Dendrogram | None = None,
                    metrics: dict | None = None, stem: str = "partition") -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"municipality_id": list(partition.municipality_ids),
                  "region_id": [partition.region_ids[k] for k in partition.labels]}).to_csv(
        root / f"{stem}.csv", index=False, lineterminator="\n")
    if dendrogram is not None:
        name = "dendrogram.csv" if stem == "partition" else f"{stem}_dendrogram.csv"
        pd.DataFrame({"step": [m.step for m in dendrogram.merges],
                      "left": [m.left for m in dendrogram.merges],
                      "right": [m.right for m in dendrogram.merges],
                      "height": np.char.mod("%.17g", dendrogram.heights)}).to_csv(
            root / name, index=False, lineterminator="\n")
    if metrics is not None:
        (root / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")


def read_partition(path, kind="markets") -> RegionPartition:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"input file not found: {path}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    for col in ("municipality_id", "region_id"):
        if col not in df.columns:
            raise ValidationError(f"{path}: missing column {col}")
    return RegionPartition.from_mapping(tuple(df["municipality_id"]),
                                        dict(zip(df["municipality_id"], df["region_id"])), kind=kind)

"""Overlap between labour markets and employment agencies, instrument areas,
and the sample-selection rules built on them.

For a market ``L`` and agency ``A`` in one timeline segment,
``s_lea = RLF(L & A) / RLF(A)``. An agency is *enclosed* when ``s_lea == 1``
and *partial* when ``0 < s_lea < 1``. ``s_tot`` is the market's RLF over the
summed RLF of its partial agencies. The instrument area of ``L`` is the set of
municipalities outside ``L`` that belong to one of its partial agencies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .delineate import RegionPartition
from .errors import ValidationError
from .geo import AgencyTimeline
from .quarters import format_quarter


@dataclass(frozen=True, eq=False)
class OverlapTable:
    """Overlap shares per (market, agency, segment) and per (market, segment).

    ``pairs`` lists every market-agency pair sharing at least one
    municipality. ``markets`` has one row per (market, segment).
    """

    pairs: pd.DataFrame
    markets: pd.DataFrame
    partition: RegionPartition
    timeline: AgencyTimeline
    rlf: np.ndarray
    agency_codes: tuple = field(default=())  # per segment: agency index per municipality

    @property
    def market_ids(self) -> tuple:
        return self.partition.region_ids

    def market_segment(self, market, segment) -> pd.Series:
        m = self.markets
        return m[(m["market"] == market) & (m["segment"] == segment)].iloc[0]

    def partial_agencies(self, market, segment) -> list:
        p = self.pairs
        sel = p[(p["market"] == market) & (p["segment"] == segment) & p["partial"]]
        return list(sel["agency"])


def compute_overlaps(partition: RegionPartition, timeline: AgencyTimeline, rlf) -> OverlapTable:
    """Exhaustive overlap table for every timeline segment."""
    rlf = np.asarray(rlf, dtype=np.int64)
    n = len(partition.municipality_ids)
    if rlf.shape != (n,):
        raise ValidationError("rlf must have one entry per municipality")
    timeline.validate(n)
    labels = partition.labels
    k = partition.n_regions
    market_rlf = np.bincount(labels, weights=rlf, minlength=k).astype(np.int64)
    pair_rows, market_rows, codes = [], [], []
    for s, seg in enumerate(timeline.segments):
        agency_ids, acode = np.unique(np.asarray(seg.agency, dtype=object).astype(str),
                                      return_inverse=True)
        codes.append(acode)
        n_ag = agency_ids.size
        agency_rlf = np.bincount(acode, weights=rlf, minlength=n_ag).astype(np.int64)
        agency_size = np.bincount(acode, minlength=n_ag)
        key = labels * n_ag + acode
        uniq, inv = np.unique(key, return_inverse=True)
        over_rlf = np.bincount(inv, weights=rlf).astype(np.int64)
        over_size = np.bincount(inv)
        mk, ag = np.divmod(uniq, n_ag)
        a_rlf = agency_rlf[ag]
        with np.errstate(invalid="ignore", divide="ignore"):
            s_lea = np.where(a_rlf > 0, over_rlf / np.maximum(a_rlf, 1),
                             over_size / agency_size[ag])
        enclosed = over_size == agency_size[ag]
        s_lea = np.where(enclosed, 1.0, s_lea)
        partial = ~enclosed & (s_lea > 0) & (s_lea < 1)
        pair_rows.append(pd.DataFrame({
            "market": np.asarray(partition.region_ids, dtype=object)[mk],
            "agency": agency_ids[ag],
            "segment": s,
            "from_quarter": seg.start,
            "to_quarter": seg.stop,
            "overlap_rlf": over_rlf,
            "agency_rlf": a_rlf,
            "market_rlf": market_rlf[mk],
            "s_lea": s_lea,
            "enclosed": enclosed,
            "partial": partial,
        }))
        part_rlf = np.bincount(mk, weights=np.where(partial, a_rlf, 0), minlength=k)
        n_partial = np.bincount(mk, weights=partial, minlength=k).astype(np.int64)
        n_enclosed = np.bincount(mk, weights=enclosed, minlength=k).astype(np.int64)
        enclosed_rlf = np.bincount(mk, weights=np.where(enclosed, a_rlf, 0), minlength=k)
        with np.errstate(divide="ignore", invalid="ignore"):
            s_tot = np.where(part_rlf > 0, market_rlf / np.where(part_rlf > 0, part_rlf, 1), np.inf)
        market_rows.append(pd.DataFrame({
            "market": list(partition.region_ids),
            "segment": s,
            "market_rlf": market_rlf,
            "partial_agency_rlf": part_rlf.astype(np.int64),
            "s_tot": s_tot,
            "n_partial": n_partial,
            "n_enclosed": n_enclosed,
            "enclosed_rlf": enclosed_rlf.astype(np.int64),
        }))
    pairs = pd.concat(pair_rows, ignore_index=True)
    markets = pd.concat(market_rows, ignore_index=True)
    return OverlapTable(pairs, markets, partition, timeline, rlf, tuple(codes))


def instrument_area(market, overlaps: OverlapTable, segment: int = 0) -> np.ndarray:
    """Municipality positions outside ``market`` in its partial agencies (sorted)."""
    try:
        mk = overlaps.partition.region_ids.index(market)
    except ValueError:
        raise ValidationError(f"unknown market {market!r}") from None
    seg = overlaps.timeline.segments[segment]
    partial = set(overlaps.partial_agencies(market, segment))
    if not partial:
        return np.empty(0, dtype=np.int64)
    agency = np.asarray(seg.agency, dtype=object).astype(str)
    inside = np.isin(agency, sorted(partial))
    return np.flatnonzero(inside & (overlaps.partition.labels != mk))


def instrument_area_matrix(overlaps: OverlapTable, segment: int = 0) -> np.ndarray:
    """Boolean (market x municipality) membership of instrument areas."""
    k = overlaps.partition.n_regions
    out = np.zeros((k, len(overlaps.partition.municipality_ids)), dtype=bool)
    for mk, market in enumerate(overlaps.partition.region_ids):
        out[mk, instrument_area(market, overlaps, segment)] = True
    return out


CRITERIA = {
    "main": {"min_agencies": 2, "s_tot_below": 0.5},
    "exo1": {"min_agencies": 2, "s_tot_below": 0.4},
    "exo2": {"min_agencies": 2, "s_tot_below": 0.6},
    "exo3": {"min_agencies": 2, "high_share": 0.5, "max_area_share": 0.5},
    "rel1": {"min_agencies": 2, "s_tot_below": 0.5, "max_enclosed_share": 0.5},
    "rel2": {"min_agencies": 2, "s_tot_below": 0.5, "s_tot_at_least": 0.05},
    "rel3": {"min_agencies": 2, "s_tot_below": 0.5, "s_tot_at_least": 0.10},
    "rel4": {"min_agencies": 2, "s_tot_below": 0.5, "min_large": 1, "large_share": 0.2},
    "rel5": {"min_agencies": 2, "s_tot_below": 0.5, "min_large": 2, "large_share": 0.1},
}


@dataclass(frozen=True)
class SelectionCriterion:
    name: str
    params: dict

    @classmethod
    def named(cls, name: str, **overrides) -> "SelectionCriterion":
        if name not in CRITERIA:
            raise ValidationError(f"unknown criterion {name!r}; expected one of {sorted(CRITERIA)}")
        params = dict(CRITERIA[name])
        unknown = set(overrides) - set(params)
        if unknown:
            raise ValidationError(f"criterion {name} has no parameter(s) {sorted(unknown)}")
        params.update(overrides)
        return cls(name, params)


def _check(criterion: SelectionCriterion, row, pairs: pd.DataFrame):
    """Return a failure reason, or None when the (market, segment) passes."""
    p = criterion.params
    n_over = int(row["n_partial"] + row["n_enclosed"])
    if n_over < p["min_agencies"]:
        return f"{n_over} overlapping agencies < {p['min_agencies']}"
    s_tot = float(row["s_tot"])
    if "s_tot_below" in p and not s_tot < p["s_tot_below"]:
        return f"s_tot {s_tot:.6g} >= {p['s_tot_below']}"
    if "s_tot_at_least" in p and not s_tot >= p["s_tot_at_least"]:
        return f"s_tot {s_tot:.6g} < {p['s_tot_at_least']}"
    if "max_enclosed_share" in p:
        share = row["enclosed_rlf"] / row["market_rlf"] if row["market_rlf"] > 0 else 0.0
        if share > p["max_enclosed_share"]:
            return f"enclosed agencies hold {share:.6g} of market RLF"
    partial = pairs[pairs["partial"]]
    if "min_large" in p:
        large = int((partial["s_lea"] > p["large_share"]).sum())
        if large < p["min_large"]:
            return f"{large} partial agencies with s_lea > {p['large_share']}"
    if "high_share" in p:
        outside = (partial["agency_rlf"] - partial["overlap_rlf"]).astype(float)
        total = outside.sum()
        if total <= 0:
            return "empty instrument area"
        high = outside[partial["s_lea"] >= p["high_share"]].sum()
        if not high / total < p["max_area_share"]:
            return f"high-overlap agencies hold {high / total:.6g} of instrument-area RLF"
    return None


@dataclass
class Selection:
    criterion: SelectionCriterion
    kept: list
    audit: dict

    def to_json(self) -> dict:
        return {"criterion": self.criterion.name, "params": self.criterion.params,
                "kept": self.kept, "n_kept": len(self.kept), "audit": self.audit}


def select_markets(overlaps: OverlapTable, criterion) -> Selection:
    """Keep markets satisfying ``criterion`` in every timeline segment."""
    if isinstance(criterion, str):
        criterion = SelectionCriterion.named(criterion)
    pairs_by = {key: grp for key, grp in overlaps.pairs.groupby(["market", "segment"], sort=False)}
    kept, audit = [], {}
    for _, row in overlaps.markets.sort_values(["market", "segment"], kind="stable").iterrows():
        market, seg = row["market"], int(row["segment"])
        rec = audit.setdefault(market, {"kept": True, "failed_segment": None, "reason": None})
        if not rec["kept"]:
            continue
        reason = _check(criterion, row, pairs_by[(market, seg)])
        if reason is not None:
            start = overlaps.timeline.segments[seg].start
            stop = overlaps.timeline.segments[seg].stop
            rec.update(kept=False, reason=reason,
                       failed_segment=f"{format_quarter(start)}-{format_quarter(stop)}")
    kept = [m for m in overlaps.partition.region_ids if audit[m]["kept"]]
    return Selection(criterion, kept, audit)


def write_overlaps(directory, overlaps: OverlapTable, selection: Selection | None = None) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    df = overlaps.pairs.copy()
    df["from_quarter"] = df["from_quarter"].map(format_quarter)
    df["to_quarter"] = df["to_quarter"].map(format_quarter)
    df["s_lea"] = np.char.mod("%.17g", df["s_lea"].to_numpy(dtype=float))
    df["enclosed"] = df["enclosed"].astype(int)
    df["partial"] = df["partial"].astype(int)
    df.to_csv(root / "overlaps.csv", index=False, lineterminator="\n")
    if selection is not None:
        (root / "selection.json").write_text(
            json.dumps(selection.to_json(), indent=2, sort_keys=True) + "\n")

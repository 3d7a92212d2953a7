"""Geographic inputs: municipalities, commuting flows, driving times, adjacency
and the time-segmented assignment of municipalities to employment agencies.

All containers are immutable after construction; numpy buffers are marked
read-only so a :class:`Geography` can be shared between readers.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import sparse

from .errors import ValidationError
from .quarters import format_quarter, parse_quarter

log = logging.getLogger(__name__)

FILE_NAMES = {
    "municipalities": "municipalities.csv",
    "flows": "flows.csv",
    "distances": "distances.csv",
    "adjacency": "adjacency.csv",
    "agencies": "agencies.csv",
}

DEFAULT_ADJACENCY_SECONDS = 900.0
SYMMETRY_TOL = 1e-9


def _readonly(arr):
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class AgencySegment:
    """Agency assignment valid on the half-open quarter interval [start, stop)."""

    start: int
    stop: int
    agency: tuple  # agency id per municipality position

    def agencies(self) -> list:
        return sorted(set(self.agency))


@dataclass(frozen=True)
class AgencyTimeline:
    segments: tuple

    @property
    def start(self) -> int:
        return self.segments[0].start

    @property
    def stop(self) -> int:
        return self.segments[-1].stop

    def segment_index(self, quarter: int) -> int:
        for k, seg in enumerate(self.segments):
            if seg.start <= quarter < seg.stop:
                return k
        raise ValidationError(f"quarter {format_quarter(quarter)} outside agency timeline")

    def boundaries(self) -> list:
        return [s.start for s in self.segments] + [self.stop]

    def validate(self, n: int, window=None) -> None:
        if not self.segments:
            raise ValidationError("agency timeline has no segments")
        for a, b in zip(self.segments, self.segments[1:]):
            if a.stop != b.start:
                raise ValidationError(
                    f"timeline gap between {format_quarter(a.stop)} and {format_quarter(b.start)}"
                )
        for seg in self.segments:
            if seg.stop <= seg.start:
                raise ValidationError("empty timeline segment")
            if len(seg.agency) != n:
                raise ValidationError("timeline segment does not cover every municipality")
        if window is not None:
            lo, hi = window
            if self.start > lo or self.stop < hi:
                raise ValidationError(
                    f"timeline gap: agencies cover [{format_quarter(self.start)}, "
                    f"{format_quarter(self.stop)}) but the window is "
                    f"[{format_quarter(lo)}, {format_quarter(hi)})"
                )


@dataclass(frozen=True, eq=False)
class Geography:
    """Validated geographic inputs, indexed by municipality position.

    ``flows[i, j]`` counts workers living in municipality ``i`` and working in
    ``j``; ``distances`` holds driving times in seconds.
    """

    ids: tuple
    names: tuple
    rlf: np.ndarray
    llf: np.ndarray
    flows: sparse.csr_matrix
    distances: np.ndarray
    adjacency: sparse.csr_matrix
    timeline: AgencyTimeline | None = None
    notes: tuple = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "rlf", _readonly(np.asarray(self.rlf, dtype=np.int64)))
        object.__setattr__(self, "llf", _readonly(np.asarray(self.llf, dtype=np.int64)))
        object.__setattr__(self, "distances", _readonly(np.asarray(self.distances, dtype=np.float64)))
        for name in ("flows", "adjacency"):
            mat = getattr(self, name).tocsr()
            mat.sort_indices()
            for buf in (mat.data, mat.indices, mat.indptr):
                buf.flags.writeable = False
            object.__setattr__(self, name, mat)
        object.__setattr__(self, "_index", {m: k for k, m in enumerate(self.ids)})

    @property
    def n(self) -> int:
        return len(self.ids)

    def index_of(self, municipality_id) -> int:
        try:
            return self._index[str(municipality_id)]
        except KeyError:
            raise ValidationError(f"unknown municipality id {municipality_id!r}") from None

    def positions(self, municipality_ids) -> np.ndarray:
        return np.array([self.index_of(m) for m in municipality_ids], dtype=np.int64)

    def neighbours(self, i: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[i]:a.indptr[i + 1]]

    def equals(self, other: "Geography") -> bool:
        """Bit-exact comparison of every stored array and mapping."""
        if self.ids != other.ids or self.names != other.names:
            return False
        for name in ("rlf", "llf", "distances"):
            a, b = getattr(self, name), getattr(other, name)
            if a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        for name in ("flows", "adjacency"):
            a, b = getattr(self, name), getattr(other, name)
            if a.shape != b.shape or (a != b).nnz:
                return False
        return self.timeline == other.timeline


def derive_labour_forces(flows) -> tuple[np.ndarray, np.ndarray]:
    """Resident (row sums) and local (column sums) labour forces."""
    mat = sparse.csr_matrix(flows)
    rlf = np.asarray(mat.sum(axis=1)).ravel().astype(np.int64)
    llf = np.asarray(mat.sum(axis=0)).ravel().astype(np.int64)
    return rlf, llf


@dataclass
class GeoConfig:
    window: tuple | None = None  # (start, stop) quarter codes
    adjacency_seconds: float = DEFAULT_ADJACENCY_SECONDS


def _resolve_paths(paths) -> dict:
    if isinstance(paths, (str, os.PathLike)):
        root = Path(paths)
        out = {k: root / v for k, v in FILE_NAMES.items()}
        if not out["adjacency"].exists():
            out["adjacency"] = None
        if not out["agencies"].exists():
            out["agencies"] = None
        return out
    out = {k: (Path(v) if v is not None else None) for k, v in dict(paths).items()}
    for key in ("municipalities", "flows", "distances"):
        if out.get(key) is None:
            raise ValidationError(f"missing required input {key!r}")
    return out


def _read_csv(path: Path, columns: Sequence[str], optional: Sequence[str] = ()) -> pd.DataFrame:
    if not path.exists():
        raise ValidationError(f"input file not found: {path}")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, UnicodeDecodeError, pd.errors.EmptyDataError) as exc:
        raise ValidationError(f"{path}: cannot parse CSV ({exc})") from None
    df.columns = [c.strip() for c in df.columns]
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise ValidationError(f"{path}: missing column(s) {', '.join(missing)}")
    keep = list(columns) + [c for c in optional if c in df.columns]
    return df[keep]


def _numeric(df: pd.DataFrame, col: str, path: Path, integer: bool) -> np.ndarray:
    raw = df[col].str.strip()
    vals = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        k = int(bad[0])
        raise ValidationError(f"{path}: row {k + 2}: {col}={df[col].iloc[k]!r} is not a number")
    if integer:
        frac = np.flatnonzero(vals != np.round(vals))
        if frac.size:
            k = int(frac[0])
            raise ValidationError(f"{path}: row {k + 2}: {col}={df[col].iloc[k]!r} is not an integer count")
    neg = np.flatnonzero(vals < 0)
    if neg.size:
        k = int(neg[0])
        raise ValidationError(f"{path}: row {k + 2}: negative {col} {df[col].iloc[k]!r}")
    return vals.astype(np.int64) if integer else vals


def load_geography(paths, config: GeoConfig | None = None) -> Geography:
    """Load and cross-validate the CSV inputs.

    Parameters
    ----------
    paths : path-like or mapping
        A directory holding the standard file names, or a mapping with keys
        ``municipalities``, ``flows``, ``distances`` and optionally
        ``adjacency`` and ``agencies``.
    config : GeoConfig, optional
        Observation window the agency timeline must cover and the driving-time
        threshold used to synthesise adjacency when no adjacency file exists.
    """
    config = config or GeoConfig()
    p = _resolve_paths(paths)
    notes = []

    mun_path = p["municipalities"]
    mun = _read_csv(mun_path, ["id"], optional=["name", "rlf", "llf"])
    ids = tuple(s.strip() for s in mun["id"])
    if any(not s for s in ids):
        k = next(i for i, s in enumerate(ids) if not s)
        raise ValidationError(f"{mun_path}: row {k + 2}: empty municipality id")
    seen = {}
    for k, m in enumerate(ids):
        if m in seen:
            raise ValidationError(f"{mun_path}: row {k + 2}: duplicate municipality id {m!r}")
        seen[m] = k
    names = tuple(mun["name"]) if "name" in mun.columns else tuple("" for _ in ids)
    n = len(ids)
    if n == 0:
        raise ValidationError(f"{mun_path}: no municipalities")

    flow_path = p["flows"]
    fl = _read_csv(flow_path, ["origin_id", "dest_id", "count"])
    counts = _numeric(fl, "count", flow_path, integer=True)
    o = fl["origin_id"].str.strip().map(seen)
    d = fl["dest_id"].str.strip().map(seen)
    inside = (o.notna() & d.notna()).to_numpy()
    if not inside.all():
        dropped = int((~inside).sum())
        notes.append(f"ignored {dropped} cross-border flow record(s)")
    oi = o[inside].to_numpy(dtype=np.int64)
    di = d[inside].to_numpy(dtype=np.int64)
    pairs = oi * n + di
    if np.unique(pairs).size != pairs.size:
        notes.append("summed duplicate flow records")
    flows = sparse.coo_matrix((counts[inside], (oi, di)), shape=(n, n)).tocsr()
    flows.sum_duplicates()
    flows.eliminate_zeros()
    rlf, llf = derive_labour_forces(flows)

    for col, derived in (("rlf", rlf), ("llf", llf)):
        if col in mun.columns:
            given = _numeric(mun, col, mun_path, integer=True)
            bad = np.flatnonzero(given != derived)
            if bad.size:
                k = int(bad[0])
                raise ValidationError(
                    f"{mun_path}: row {k + 2}: {col} {given[k]} inconsistent with flows ({derived[k]})"
                )

    distances = _load_distances(p["distances"], seen, n)

    if p.get("adjacency") is not None:
        adjacency = _load_adjacency(p["adjacency"], seen, n)
    else:
        notes.append(f"adjacency synthesised from driving time < {config.adjacency_seconds:g} s")
        adjacency = adjacency_from_distances(distances, config.adjacency_seconds)

    timeline = None
    if p.get("agencies") is not None:
        timeline = _load_timeline(p["agencies"], seen, n)
        timeline.validate(n, config.window)
    elif config.window is not None:
        raise ValidationError("agency timeline required to cover the observation window")

    for note in notes:
        log.info(note)
    return Geography(ids, names, rlf, llf, flows, distances, adjacency, timeline, tuple(notes))


def _load_distances(path: Path, index: Mapping, n: int) -> np.ndarray:
    df = _read_csv(path, ["id_a", "id_b", "seconds"])
    secs = _numeric(df, "seconds", path, integer=False)
    a = df["id_a"].str.strip().map(index)
    b = df["id_b"].str.strip().map(index)
    unknown = np.flatnonzero((a.isna() | b.isna()).to_numpy())
    if unknown.size:
        k = int(unknown[0])
        raise ValidationError(f"{path}: row {k + 2}: unknown municipality id")
    ai = a.to_numpy(dtype=np.int64)
    bi = b.to_numpy(dtype=np.int64)
    diag = np.flatnonzero((ai == bi) & (secs != 0))
    if diag.size:
        k = int(diag[0])
        raise ValidationError(f"{path}: row {k + 2}: non-zero self distance")
    dist = np.full((n, n), np.nan)
    np.fill_diagonal(dist, 0.0)
    lo, hi = np.minimum(ai, bi), np.maximum(ai, bi)
    order = np.lexsort((hi, lo))
    lo, hi, vals = lo[order], hi[order], secs[order]
    key = lo * n + hi
    first = np.ones(key.size, dtype=bool)
    first[1:] = key[1:] != key[:-1]
    # repeated pairs must agree
    grp = np.cumsum(first) - 1
    ref = vals[first][grp]
    clash = np.flatnonzero(np.abs(vals - ref) > SYMMETRY_TOL)
    if clash.size:
        k = int(order[clash[0]])
        raise ValidationError(f"{path}: row {k + 2}: asymmetric distance for pair")
    dist[lo[first], hi[first]] = vals[first]
    dist[hi[first], lo[first]] = vals[first]
    missing = np.argwhere(np.isnan(dist))
    if missing.size:
        i, j = missing[0]
        raise ValidationError(f"{path}: {len(missing) // 2} municipality pair(s) without a driving time (first: row for {i},{j})")
    return dist


def _load_adjacency(path: Path, index: Mapping, n: int) -> sparse.csr_matrix:
    df = _read_csv(path, ["id_a", "id_b"])
    a = df["id_a"].str.strip().map(index)
    b = df["id_b"].str.strip().map(index)
    unknown = np.flatnonzero((a.isna() | b.isna()).to_numpy())
    if unknown.size:
        k = int(unknown[0])
        raise ValidationError(f"{path}: row {k + 2}: unknown municipality id")
    ai = a.to_numpy(dtype=np.int64)
    bi = b.to_numpy(dtype=np.int64)
    keep = ai != bi
    return _symmetric_graph(ai[keep], bi[keep], n)


def _symmetric_graph(a, b, n) -> sparse.csr_matrix:
    rows = np.concatenate([a, b])
    cols = np.concatenate([b, a])
    g = sparse.coo_matrix((np.ones(rows.size, dtype=bool), (rows, cols)), shape=(n, n)).tocsr()
    g.sum_duplicates()
    g.data[:] = True
    return g


def adjacency_from_distances(distances: np.ndarray, threshold: float) -> sparse.csr_matrix:
    mask = np.asarray(distances) < threshold
    np.fill_diagonal(mask, False)
    a, b = np.nonzero(np.triu(mask))
    return _symmetric_graph(a, b, mask.shape[0])


def _load_timeline(path: Path, index: Mapping, n: int) -> AgencyTimeline:
    df = _read_csv(path, ["municipality_id", "agency_id", "from_quarter", "to_quarter"])
    rows = []
    for k, rec in enumerate(df.itertuples(index=False)):
        m = index.get(rec.municipality_id.strip())
        if m is None:
            raise ValidationError(f"{path}: row {k + 2}: unknown municipality id {rec.municipality_id!r}")
        try:
            lo, hi = parse_quarter(rec.from_quarter), parse_quarter(rec.to_quarter)
        except ValidationError as exc:
            raise ValidationError(f"{path}: row {k + 2}: {exc}") from None
        if hi <= lo:
            raise ValidationError(f"{path}: row {k + 2}: empty interval")
        agency = rec.agency_id.strip()
        if not agency:
            raise ValidationError(f"{path}: row {k + 2}: empty agency id")
        rows.append((m, agency, lo, hi, k + 2))
    if not rows:
        raise ValidationError(f"{path}: no agency assignments")
    bounds = sorted({r[2] for r in rows} | {r[3] for r in rows})
    seg_of = {b: s for s, b in enumerate(bounds[:-1])}
    assign = [[None] * n for _ in bounds[:-1]]
    for m, agency, lo, hi, line in rows:
        for s in range(seg_of[lo], bounds.index(hi)):
            if assign[s][m] is not None:
                raise ValidationError(f"{path}: row {line}: overlapping assignment for municipality")
            assign[s][m] = agency
    segments = []
    for s, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
        if any(a is None for a in assign[s]):
            m = next(i for i, a in enumerate(assign[s]) if a is None)
            raise ValidationError(
                f"timeline gap: municipality position {m} unassigned in [{format_quarter(lo)}, {format_quarter(hi)})"
            )
        segments.append(AgencySegment(lo, hi, tuple(assign[s])))
    return AgencyTimeline(tuple(segments))


def write_geography(geo: Geography, directory) -> dict:
    """Emit the documented CSV files; returns the written paths."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    ids = np.array(geo.ids, dtype=object)
    paths = {k: root / v for k, v in FILE_NAMES.items()}

    pd.DataFrame({"id": ids, "name": list(geo.names), "rlf": geo.rlf, "llf": geo.llf}).to_csv(
        paths["municipalities"], index=False, lineterminator="\n")

    coo = geo.flows.tocoo()
    order = np.lexsort((coo.col, coo.row))
    pd.DataFrame({"origin_id": ids[coo.row[order]], "dest_id": ids[coo.col[order]],
                  "count": coo.data[order].astype(np.int64)}).to_csv(
        paths["flows"], index=False, lineterminator="\n")

    iu, ju = np.triu_indices(geo.n, k=1)
    secs = np.char.mod("%.17g", geo.distances[iu, ju])
    pd.DataFrame({"id_a": ids[iu], "id_b": ids[ju], "seconds": secs}).to_csv(
        paths["distances"], index=False, lineterminator="\n")

    adj = sparse.triu(geo.adjacency, k=1).tocoo()
    order = np.lexsort((adj.col, adj.row))
    pd.DataFrame({"id_a": ids[adj.row[order]], "id_b": ids[adj.col[order]]}).to_csv(
        paths["adjacency"], index=False, lineterminator="\n")

    if geo.timeline is not None:
        recs = []
        for seg in geo.timeline.segments:
            lo, hi = format_quarter(seg.start), format_quarter(seg.stop)
            recs.extend((m, a, lo, hi) for m, a in zip(geo.ids, seg.agency))
        pd.DataFrame(recs, columns=["municipality_id", "agency_id", "from_quarter", "to_quarter"]).to_csv(
            paths["agencies"], index=False, lineterminator="\n")
    else:
        paths.pop("agencies")
    return paths

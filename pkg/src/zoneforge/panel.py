"""Labour-market x quarter panel built from person-quarter records.

The pipeline is ``micro records -> municipality counts -> market counts ->
censoring -> rates -> regression dataset``. Counting is a pure fold, so
counting shards separately and adding the results is identical to counting
everything at once.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .delineate import RegionPartition
from .errors import ValidationError
from .quarters import format_quarter, parse_quarter

log = logging.getLogger(__name__)

STATES = ("unsub_employed", "sub_employed", "ui_unemployed", "welfare_unemployed",
          "employed_on_benefits", "out")
PROGRAMS = ("training", "short_measure", "wage_subsidy")
OTHER_PROGRAMS = ("other_ltu", "other_young", "other")
ALL_PROGRAMS = ("none",) + PROGRAMS + OTHER_PROGRAMS
EMPLOYED_STATES = ("unsub_employed", "sub_employed", "employed_on_benefits")

# attribute -> categories; the first category is the reference and is dropped
ATTRIBUTES = {
    "gender": ("male", "female"),
    "age_band": ("20-29", "30-39", "40-49", "50-64"),
    "education": ("basic", "high_school"),
    "skill": ("none", "vocational", "academic"),
    "industry": ("public", "primary", "construction", "services"),
    "nationality": ("foreign", "german"),
}
UNEMPLOYED_ATTRIBUTES = ("gender", "age_band", "education", "skill", "industry")

# outcome -> state counted in the numerator; denominators are the RLF
OUTCOMES = {
    "unemployment": "ui",
    "unsub_employment": "unsub",
    "welfare": "welfare",
    "employed_on_benefits": "eob",
}
STATE_COUNT = {"unsub_employed": "unsub", "sub_employed": "sub", "ui_unemployed": "ui",
               "welfare_unemployed": "welfare", "employed_on_benefits": "eob", "out": "out"}

MICRO_COLUMNS = ("person_id", "municipality_id", "quarter", "state", "program") + tuple(ATTRIBUTES)


def _slug(cat: str) -> str:
    return cat.replace("-", "_")


def composition_columns(group: str) -> list:
    """Count columns of the composition controls for ``emp`` or ``ue``."""
    attrs = ATTRIBUTES if group == "emp" else UNEMPLOYED_ATTRIBUTES
    return [f"{group}_{_slug(c)}" if a != "age_band" else f"{group}_age_{_slug(c)}"
            for a in attrs for c in ATTRIBUTES[a][1:]]


def _composition_spec(group: str):
    attrs = ATTRIBUTES if group == "emp" else UNEMPLOYED_ATTRIBUTES
    for a in attrs:
        for c in ATTRIBUTES[a][1:]:
            name = f"{group}_{_slug(c)}" if a != "age_band" else f"{group}_age_{_slug(c)}"
            yield name, a, c


def subgroup_columns(subgroups: Sequence[str]) -> list:
    cols = []
    for a in subgroups:
        for c in ATTRIBUTES[a]:
            tag = f"{a}_{_slug(c)}"
            cols.append(f"sg_{tag}_rlf")
            cols.extend(f"sg_{tag}_{s}" for s in OUTCOMES.values())
    return cols


BASE_COUNTS = ("rlf", "ui", "sub", "welfare", "eob", "out", "unsub", "emp") + PROGRAMS + OTHER_PROGRAMS


def count_columns(composition: bool = True, subgroups: Sequence[str] = ()) -> tuple:
    cols = list(BASE_COUNTS)
    if composition:
        cols += composition_columns("emp") + composition_columns("ue")
    cols += subgroup_columns(subgroups)
    return tuple(cols)


@dataclass(frozen=True, eq=False)
class CountCube:
    """Integer counts per (municipality, quarter, column)."""

    municipality_ids: tuple
    start: int
    columns: tuple
    data: np.ndarray  # int64, shape (n_municipalities, n_quarters, n_columns)

    @property
    def stop(self) -> int:
        return self.start + self.data.shape[1]

    @property
    def quarters(self) -> range:
        return range(self.start, self.stop)

    def col(self, name: str) -> np.ndarray:
        return self.data[:, :, self.columns.index(name)]

    def merge(self, other: "CountCube") -> "CountCube":
        if (other.municipality_ids, other.start, other.columns) != (
                self.municipality_ids, self.start, self.columns) or other.data.shape != self.data.shape:
            raise ValidationError("count shards differ in layout")
        return replace(self, data=self.data + other.data)

    def window(self, start: int, stop: int) -> "CountCube":
        if start < self.start or stop > self.stop:
            raise ValidationError(
                f"counts cover [{format_quarter(self.start)}, {format_quarter(self.stop)}), "
                f"window [{format_quarter(start)}, {format_quarter(stop)}) requested")
        return replace(self, start=start, data=self.data[:, start - self.start: stop - self.start])

    def equals(self, other: "CountCube") -> bool:
        return (self.municipality_ids == other.municipality_ids and self.start == other.start
                and self.columns == other.columns and np.array_equal(self.data, other.data))


def validate_micro(micro: pd.DataFrame) -> None:
    """Check schema and the state/program invariants (raises on the first bad row)."""
    missing = [c for c in MICRO_COLUMNS if c not in micro.columns]
    if missing:
        raise ValidationError(f"micro records missing columns {missing}")
    state = micro["state"].to_numpy()
    program = micro["program"].to_numpy()
    checks = [(~np.isin(state, STATES), "unknown state"),
              (~np.isin(program, ALL_PROGRAMS), "unknown program"),
              ((program == "wage_subsidy") & (state != "sub_employed"),
               "wage_subsidy requires state sub_employed"),
              (np.isin(program, ("training", "short_measure") + OTHER_PROGRAMS)
               & (state != "ui_unemployed"), "program requires state ui_unemployed")]
    for a, cats in ATTRIBUTES.items():
        checks.append((~np.isin(micro[a].to_numpy(), cats), f"invalid {a}"))
    for bad, what in checks:
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise ValidationError(f"micro record {row + 1}: {what} ({micro.iloc[row].to_dict()})")


def count_spells(micro: pd.DataFrame, municipality_ids: Sequence, window: tuple,
                 subgroups: Sequence[str] = (), validate: bool = True) -> CountCube:
    """Fold person-quarter records into municipality-quarter counts."""
    if validate:
        validate_micro(micro)
    start, stop = window
    ids = tuple(municipality_ids)
    index = pd.Index(ids)
    mpos = index.get_indexer(micro["municipality_id"].astype(str))
    if (mpos < 0).any():
        bad = micro["municipality_id"].iloc[int(np.flatnonzero(mpos < 0)[0])]
        raise ValidationError(f"micro record for unknown municipality {bad!r}")
    quarter = micro["quarter"]
    q = quarter.to_numpy() if np.issubdtype(quarter.dtype, np.integer) else \
        np.array([parse_quarter(v) for v in quarter], dtype=np.int64)
    keep = (q >= start) & (q < stop)
    m = micro.loc[keep]
    mpos, q = mpos[keep], q[keep] - start
    state = m["state"].to_numpy()
    program = m["program"].to_numpy()
    employed = np.isin(state, EMPLOYED_STATES)
    ui = state == "ui_unemployed"

    cols = count_columns(True, subgroups)
    ind = {"rlf": np.ones(len(m), dtype=bool), "emp": employed}
    for s, c in STATE_COUNT.items():
        ind[c] = state == s
    for p in PROGRAMS + OTHER_PROGRAMS:
        ind[p] = program == p
    for group, mask in (("emp", employed), ("ue", ui)):
        for name, attr, cat in _composition_spec(group):
            ind[name] = mask & (m[attr].to_numpy() == cat)
    for a in subgroups:
        vals = m[a].to_numpy()
        for c in ATTRIBUTES[a]:
            member = vals == c
            tag = f"sg_{a}_{_slug(c)}"
            ind[f"{tag}_rlf"] = member
            for s in OUTCOMES.values():
                ind[f"{tag}_{s}"] = member & ind[s]

    n_q = stop - start
    cell = mpos * n_q + q
    data = np.empty((len(ids), n_q, len(cols)), dtype=np.int64)
    size = len(ids) * n_q
    for k, c in enumerate(cols):
        data[:, :, k] = np.bincount(cell, weights=ind[c], minlength=size).reshape(len(ids), n_q)
    return CountCube(ids, start, cols, data)


def read_micro(path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"input file not found: {path}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in MICRO_COLUMNS if c not in df.columns]
    if missing:
        raise ValidationError(f"{path}: missing columns {missing}")
    try:
        df["quarter"] = np.array([parse_quarter(v) for v in df["quarter"]], dtype=np.int64)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    return df


def write_micro(micro: pd.DataFrame, path) -> None:
    out = micro.copy()
    if np.issubdtype(out["quarter"].dtype, np.integer):
        out["quarter"] = [format_quarter(v) for v in out["quarter"]]
    out.to_csv(path, index=False, columns=list(MICRO_COLUMNS), lineterminator="\n")


def write_counts(cube: CountCube, path) -> None:
    """Municipality x quarter counts, one row per cell."""
    n, T, _ = cube.data.shape
    df = pd.DataFrame(cube.data.reshape(n * T, -1), columns=list(cube.columns))
    df.insert(0, "quarter", [format_quarter(v) for v in np.tile(np.arange(cube.start, cube.stop), n)])
    df.insert(0, "municipality_id", np.repeat(np.asarray(cube.municipality_ids, dtype=object), T))
    df.to_csv(path, index=False, lineterminator="\n")


def read_counts(path, municipality_ids: Sequence) -> CountCube:
    """Inverse of :func:`write_counts`; every municipality-quarter cell must be present."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"input file not found: {path}")
    df = pd.read_csv(path, dtype={"municipality_id": str, "quarter": str})
    for col in ("municipality_id", "quarter") + BASE_COUNTS:
        if col not in df.columns:
            raise ValidationError(f"{path}: missing column {col}")
    cols = tuple(c for c in df.columns if c not in ("municipality_id", "quarter"))
    ids = tuple(municipality_ids)
    mpos = pd.Index(ids).get_indexer(df["municipality_id"])
    if (mpos < 0).any():
        bad = df["municipality_id"].iloc[int(np.flatnonzero(mpos < 0)[0])]
        raise ValidationError(f"{path}: unknown municipality {bad!r}")
    q = np.array([parse_quarter(v) for v in df["quarter"]], dtype=np.int64)
    start, T = int(q.min()), int(q.max() - q.min() + 1)
    if len(df) != len(ids) * T or len(set(zip(mpos, q))) != len(df):
        raise ValidationError(f"{path}: expected one row per municipality and quarter")
    values = df[list(cols)].to_numpy()
    if not np.issubdtype(values.dtype, np.integer) or (values < 0).any():
        raise ValidationError(f"{path}: counts must be non-negative integers")
    data = np.zeros((len(ids), T, len(cols)), dtype=np.int64)
    data[mpos, q - start] = values
    return CountCube(ids, start, cols, data)


@dataclass(frozen=True)
class CensorPolicy:
    """Counts in ``1..threshold-1`` are censored; ``enabled=False`` is a no-op."""

    threshold: int = 3
    enabled: bool = True


@dataclass(eq=False)
class QuarterPanel:
    """Market x quarter panel.

    ``frame`` holds keys (``market``, ``quarter``), raw market counts
    (``n_*``), instrument-area counts (``a_*``), censor flags (``*_cens``) and
    the rates derived from the counts.
    """

    frame: pd.DataFrame
    programs: tuple = PROGRAMS
    controls: tuple = ()
    outcomes: tuple = tuple(OUTCOMES)
    censored: bool = False

    @property
    def markets(self) -> list:
        return list(dict.fromkeys(self.frame["market"]))

    @property
    def quarters(self) -> np.ndarray:
        return np.unique(self.frame["quarter"].to_numpy())

    def flag_columns(self) -> list:
        return [c for c in self.frame.columns if c.endswith("_cens")]


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.full(num.shape, np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def _control_defs(frame: pd.DataFrame) -> list:
    """(control name, numerator column, denominator column) for available counts."""
    defs = []
    for group, den in (("emp", "n_emp"), ("ue", "n_ui")):
        for name in composition_columns(group):
            if f"n_{name}" in frame.columns:
                defs.append((name, f"n_{name}", den))
    for p in OTHER_PROGRAMS:
        defs.append((f"prog_{p}", f"n_{p}", "n_ui"))
    defs.append(("welfare_share", "n_welfare", "n_rlf"))
    return defs


def _outcome_defs(frame: pd.DataFrame) -> list:
    defs = [(o, f"n_{c}", "n_rlf") for o, c in OUTCOMES.items()]
    for a, cats in ATTRIBUTES.items():
        for c in cats:
            tag = f"sg_{a}_{_slug(c)}"
            if f"n_{tag}_rlf" in frame.columns:
                defs.extend((f"{o}__{a}_{_slug(c)}", f"n_{tag}_{s}", f"n_{tag}_rlf")
                            for o, s in OUTCOMES.items())
    return defs


def compute_rates(frame: pd.DataFrame, programs=PROGRAMS) -> pd.DataFrame:
    """(Re)compute every rate column from the count columns in place."""
    for name, num, den in _outcome_defs(frame):
        frame[name] = _ratio(frame[num], frame[den])
    for p in programs:
        frame[f"x_{p}"] = _ratio(frame[f"n_{p}"], frame["n_ui"])
        if f"a_{p}" in frame.columns:
            frame[f"z_{p}"] = _ratio(frame[f"a_{p}"], frame["a_ui"])
    for name, num, den in _control_defs(frame):
        share = _ratio(frame[num], frame[den])
        flag = f"{name}_cens"
        if flag in frame.columns:
            share[frame[flag].to_numpy() != 0] = 0.0
        frame[name] = share
    return frame


def aggregate_panel(counts: CountCube, partition: RegionPartition, overlaps=None,
                    window: tuple | None = None, markets: Iterable | None = None,
                    programs: Sequence[str] = PROGRAMS) -> QuarterPanel:
    """Sum municipality counts to markets and instrument areas; compute rates.

    Parameters
    ----------
    counts : CountCube
        Municipality-level counts; municipalities in partition order.
    partition : RegionPartition
        Labour markets over municipalities.
    overlaps : OverlapTable, optional
        Source of the instrument areas; the area of the timeline segment
        containing each quarter is used. Without it no ``z_*`` columns exist.
    window : (start, stop), optional
        Quarter window; defaults to the span of ``counts``.
    markets : iterable of market ids, optional
        Restrict the panel to these markets (instrument areas still use all
        municipalities).
    """
    from .overlap import instrument_area_matrix

    if tuple(counts.municipality_ids) != tuple(partition.municipality_ids):
        raise ValidationError("counts and partition list different municipalities")
    start, stop = window if window is not None else (counts.start, counts.stop)
    cube = counts.window(start, stop)
    k, n_q = partition.n_regions, stop - start
    ind = partition.indicator().T.tocsr().astype(np.int64)
    flat = cube.data.reshape(cube.data.shape[0], -1)
    market = (ind @ flat).reshape(k, n_q, len(cube.columns))

    cols = {f"n_{c}": market[:, :, j] for j, c in enumerate(cube.columns)}
    if overlaps is not None:
        overlaps.timeline.validate(partition.labels.size, (start, stop))
        area_cols = ["ui"] + list(programs)
        src = np.stack([cube.col(c) for c in area_cols], axis=-1)
        area = np.zeros((k, n_q, len(area_cols)), dtype=np.int64)
        for s, seg in enumerate(overlaps.timeline.segments):
            lo, hi = max(seg.start, start), min(seg.stop, stop)
            if lo >= hi:
                continue
            mat = instrument_area_matrix(overlaps, s).astype(np.int64)
            part = src[:, lo - start: hi - start].reshape(src.shape[0], -1)
            area[:, lo - start: hi - start] = (mat @ part).reshape(k, hi - lo, len(area_cols))
        cols.update({f"a_{c}": area[:, :, j] for j, c in enumerate(area_cols)})

    if (cols["n_rlf"] == 0).any():
        mk, qq = np.argwhere(cols["n_rlf"] == 0)[0]
        raise ValidationError(
            f"market {partition.region_ids[mk]} has zero resident labour force in {format_quarter(start + qq)}")
    frame = pd.DataFrame({"market": np.repeat(np.asarray(partition.region_ids, dtype=object), n_q),
                          "quarter": np.tile(np.arange(start, stop, dtype=np.int64), k)})
    frame = pd.concat([frame, pd.DataFrame({n: a.reshape(-1) for n, a in cols.items()})], axis=1)
    if markets is not None:
        wanted = list(markets)
        unknown = set(wanted) - set(partition.region_ids)
        if unknown:
            raise ValidationError(f"unknown markets {sorted(unknown)}")
        frame = frame[frame["market"].isin(wanted)].reset_index(drop=True)
    compute_rates(frame, programs)
    flags = {f"{c}_cens": np.zeros(len(frame), dtype=np.int64) for c in _flag_targets(frame, programs)}
    frame = pd.concat([frame, pd.DataFrame(flags, index=frame.index)], axis=1)
    controls = tuple(name for name, _, _ in _control_defs(frame))
    outcomes = tuple(name for name, _, _ in _outcome_defs(frame))
    return QuarterPanel(frame, tuple(programs), controls, outcomes)


def _flag_targets(frame, programs) -> list:
    out = [o for o, _, _ in _outcome_defs(frame)]
    out += [f"x_{p}" for p in programs]
    out += [f"z_{p}" for p in programs if f"a_{p}" in frame.columns]
    out += [name for name, _, _ in _control_defs(frame)]
    return out


def apply_censoring(panel: QuarterPanel, policy: CensorPolicy = CensorPolicy()) -> QuarterPanel:
    """Apply small-count censoring and recompute rates.

    * program counts (market and instrument area) in the censored range are
      imputed with 1;
    * controls whose count is in the range are set to 0 (counts are kept);
    * outcome counts are left unchanged but flagged, which removes the market
      from any regression on that outcome.

    Flags accumulate, so applying the policy twice equals applying it once.
    """
    frame = panel.frame.copy()
    if not policy.enabled:
        return QuarterPanel(frame, panel.programs, panel.controls, panel.outcomes, True)

    def small(col):
        v = frame[col].to_numpy()
        return (v > 0) & (v < policy.threshold)

    for p in panel.programs:
        for prefix, rate in (("n", "x"), ("a", "z")):
            col = f"{prefix}_{p}"
            if col not in frame.columns:
                continue
            hit = small(col)
            frame.loc[hit, col] = 1
            frame[f"{rate}_{p}_cens"] = frame[f"{rate}_{p}_cens"].to_numpy() | hit
    for name, num, _ in _control_defs(frame):
        frame[f"{name}_cens"] = frame[f"{name}_cens"].to_numpy() | small(num)
    for name, num, _ in _outcome_defs(frame):
        frame[f"{name}_cens"] = frame[f"{name}_cens"].to_numpy() | small(num)
    for c in [c for c in frame.columns if c.endswith("_cens")]:
        frame[c] = frame[c].astype(np.int64)
    compute_rates(frame, panel.programs)
    return QuarterPanel(frame, panel.programs, panel.controls, panel.outcomes, True)


def write_panel(panel: QuarterPanel, path) -> None:
    out = panel.frame.copy()
    out["quarter"] = [format_quarter(v) for v in out["quarter"]]
    out.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def read_panel(path) -> QuarterPanel:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"input file not found: {path}")
    frame = pd.read_csv(path, dtype={"market": str})
    frame["quarter"] = np.array([parse_quarter(v) for v in frame["quarter"]], dtype=np.int64)
    programs = tuple(c[2:] for c in frame.columns if c.startswith("x_") and not c.endswith("_cens"))
    controls = tuple(name for name, _, _ in _control_defs(frame))
    outcomes = tuple(name for name, _, _ in _outcome_defs(frame))
    return QuarterPanel(frame, programs, controls, outcomes, censored=True)


# ---------------------------------------------------------------- regression


@dataclass(eq=False)
class RegressionDataset:
    """Differenced and lagged rows for one outcome.

    ``frame`` has one row per (market, quarter) in the estimation window with
    ``dy`` = y_t - y_{t-4}, ``dy_lag1`` = dy at t-1, ``dx_<p>_l<j>`` and
    ``dz_<p>_l<j>`` = four-quarter differences of the rates at t-j, and
    ``w_<c>`` = control level at t-q. ``usable`` marks rows whose referenced
    values all exist.
    """

    frame: pd.DataFrame
    usable: np.ndarray
    outcome: str
    programs: tuple
    q: int
    controls: tuple
    flags: tuple
    excluded_markets: tuple = ()
    window: tuple = ()

    def endogenous(self, programs=None) -> list:
        return [f"dx_{p}_l{j}" for p in (programs or self.programs) for j in range(self.q + 1)]

    def instruments(self, programs=None) -> list:
        return [f"dz_{p}_l{j}" for p in (programs or self.programs) for j in range(self.q + 1)]

    @property
    def has_instruments(self) -> bool:
        return all(c in self.frame.columns for c in self.instruments())

    def rows(self) -> pd.DataFrame:
        return self.frame.loc[self.usable].reset_index(drop=True)


def earliest_usable(panel_start: int, q: int) -> int:
    """First quarter whose lags (dy at t-1 and dx at t-q) exist in the panel."""
    return panel_start + max(5, q + 4)


def build_regression_dataset(panel: QuarterPanel, outcome: str = "unemployment", q: int = 6,
                             programs: Sequence[str] | None = None,
                             controls: Sequence[str] | None = None,
                             window: tuple | None = None,
                             markets: Iterable | None = None) -> RegressionDataset:
    """Lag and difference the panel for the ARDL(1, q) regression.

    Markets with a censored outcome anywhere in the quarters the regression
    reads are dropped for this outcome.
    """
    if q < 0:
        raise ValidationError("q must be non-negative")
    frame = panel.frame
    if outcome not in frame.columns:
        raise ValidationError(f"unknown outcome {outcome!r}")
    programs = tuple(programs if programs is not None else panel.programs)
    controls = tuple(controls if controls is not None else panel.controls)
    for c in controls:
        if c not in frame.columns:
            raise ValidationError(f"unknown control {c!r}")
    quarters = panel.quarters
    p_start, p_stop = int(quarters.min()), int(quarters.max()) + 1
    if quarters.size != p_stop - p_start:
        raise ValidationError("panel quarters are not contiguous")
    first = earliest_usable(p_start, q)
    start, stop = window if window is not None else (first, p_stop)
    if start < first:
        raise ValidationError(
            f"insufficient burn-in: with q={q} the earliest usable quarter is {format_quarter(first)}, "
            f"window starts {format_quarter(start)}")
    if stop > p_stop or stop <= start:
        raise ValidationError(f"estimation window ends after the panel ({format_quarter(p_stop)})")

    mlist = panel.markets if markets is None else [m for m in panel.markets if m in set(markets)]
    frame = frame[frame["market"].isin(mlist)]
    order = {m: i for i, m in enumerate(mlist)}
    frame = frame.sort_values(["market", "quarter"], key=lambda s: s.map(order) if s.name == "market" else s,
                              kind="stable")
    n_m, n_q = len(mlist), p_stop - p_start

    def grid(col):
        return frame[col].to_numpy(dtype=np.float64).reshape(n_m, n_q)

    lo, hi = start - p_start, stop - p_start
    excluded = []
    flag = f"{outcome}_cens"
    keep = np.ones(n_m, dtype=bool)
    if flag in frame.columns:
        bad = grid(flag)[:, lo - 5: hi].any(axis=1)
        keep &= ~bad
        excluded = [m for m, b in zip(mlist, bad) if b]

    def d4(arr, lag):
        # Δ4 v at t-lag, for t in the window
        return arr[:, lo - lag: hi - lag] - arr[:, lo - lag - 4: hi - lag - 4]

    y = grid(outcome)
    cols = {"dy": d4(y, 0), "dy_lag1": d4(y, 1)}
    for p in programs:
        x = grid(f"x_{p}")
        for j in range(q + 1):
            cols[f"dx_{p}_l{j}"] = d4(x, j)
        if f"z_{p}" in frame.columns:
            z = grid(f"z_{p}")
            for j in range(q + 1):
                cols[f"dz_{p}_l{j}"] = d4(z, j)
    for c in controls:
        cols[f"w_{c}"] = grid(c)[:, lo - q: hi - q]
    flags = []
    for c in controls:
        fc = f"{c}_cens"
        if fc in frame.columns:
            v = grid(fc)[:, lo - q: hi - q]
            cols[f"w_{fc}"] = v
            flags.append(f"w_{fc}")

    n_t = hi - lo
    kept = np.asarray(mlist, dtype=object)[keep]
    out = pd.DataFrame({"market": np.repeat(kept, n_t),
                        "quarter": np.tile(np.arange(start, stop, dtype=np.int64), len(kept))})
    for name, arr in cols.items():
        out[name] = arr[keep].reshape(-1)
    value_cols = [c for c in out.columns if c not in ("market", "quarter")]
    usable = np.isfinite(out[value_cols].to_numpy(dtype=np.float64)).all(axis=1)
    flags = [f for f in flags if out.loc[usable, f].any()]
    out = out.drop(columns=[c for c in out.columns if c.endswith("_cens") and c not in flags])
    return RegressionDataset(out, usable, outcome, programs, q, tuple(f"w_{c}" for c in controls),
                             tuple(flags), tuple(excluded), (start, stop))

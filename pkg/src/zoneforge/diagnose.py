"""First-stage strength diagnostics and the market-level bootstrap.

Conditional first-stage F statistics for endogenous column ``x_k`` with
``K`` endogenous columns, ``L`` excluded instruments ``Z`` and ``kw``
included exogenous columns ``W`` (``Zf = [Z, W]``):

* Sanderson-Windmeijer: estimate ``x_k = X_{-k} d + W g`` by 2SLS with
  instruments ``Zf`` and take ``e = x_k - X_{-k} d - W g``.
* Angrist-Pischke: same coefficients, residual taken with the first-stage
  fitted values, ``r = x_k - Xhat_{-k} d - W g``.

Both use ``F = [u' P_Zf u / (L - K + 1)] / [u' M_Zf u / (n - L - kw)]``.
The numerators coincide; with one endogenous column both reduce to the
ordinary first-stage F test of the excluded instruments.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .errors import NumericalError, ValidationError
from .estimate import Design, FitResult, ModelSpec, build_design, fit_design
from .linalg import lstsq, project

log = logging.getLogger(__name__)

THREADS_ENV = "ZONEFORGE_THREADS"
MAX_FAILURE_SHARE = 0.05


@dataclass
class FirstStageReport:
    columns: list
    sw_f: np.ndarray
    sw_p: np.ndarray
    ap_f: np.ndarray
    ap_p: np.ndarray
    df: tuple
    coefficients: dict = field(default_factory=dict)  # column -> {instrument: coef}

    def to_json(self) -> dict:
        return {"df": list(self.df), "columns": {
            c: {"sw_f": float(self.sw_f[k]), "sw_p": float(self.sw_p[k]),
                "ap_f": float(self.ap_f[k]), "ap_p": float(self.ap_p[k]),
                "first_stage": self.coefficients.get(c, {})}
            for k, c in enumerate(self.columns)}}


def conditional_f(endog, excluded, exog, names=None):
    """SW and AP statistics for every column of ``endog``.

    Returns ``(sw_f, ap_f, (df1, df2))``.
    """
    X = np.asarray(endog, dtype=np.float64)
    Z = np.asarray(excluded, dtype=np.float64)
    W = np.asarray(exog, dtype=np.float64)
    n, K = X.shape
    L, kw = Z.shape[1], W.shape[1]
    df1, df2 = L - K + 1, n - L - kw
    if df1 < 1:
        raise ValidationError(f"{L} instruments cannot identify {K} endogenous columns")
    if df2 < 1:
        raise NumericalError("too few rows for the first-stage F statistics")
    Zf = np.hstack([Z, W])
    names = names or [f"x{k}" for k in range(K)]
    xhat = project(Zf, X, what="first-stage instruments")  # also checks the rank of Zf
    Qf = np.linalg.qr(Zf)[0]
    sw, ap = np.empty(K), np.empty(K)
    for k in range(K):
        others = [j for j in range(K) if j != k]
        xk = X[:, k]
        if others:
            Xh = np.hstack([xhat[:, others], W])
            sol = lstsq(Xh, xk, [names[j] for j in others] + [f"w{j}" for j in range(kw)],
                        what=f"partialling step for {names[k]}")
            d, g = sol.coef[: len(others)], sol.coef[len(others):]
            e = xk - X[:, others] @ d - W @ g
            r = xk - xhat[:, others] @ d - W @ g
        else:
            g = lstsq(W, xk, what=f"partialling step for {names[k]}").coef
            e = r = xk - W @ g
        for u, out in ((e, sw), (r, ap)):
            pu = Qf @ (Qf.T @ u)
            num = float(pu @ pu) / df1
            res = u - pu
            den = float(res @ res) / df2
            out[k] = num / den if den > 0 else np.inf
    return sw, ap, (df1, df2)


def first_stage(data, spec: ModelSpec) -> FirstStageReport:
    """SW and AP first-stage statistics for every endogenous policy column."""
    from dataclasses import asdict

    tspec = ModelSpec(**{**asdict(spec), "estimator": "tsls"})
    design = build_design(data, tspec)
    return first_stage_design(design)


def first_stage_design(design: Design) -> FirstStageReport:
    sw, ap, (df1, df2) = conditional_f(design.endog, design.excluded, design.exog, design.endog_names)
    coefs = {}
    Zf = np.hstack([design.excluded, design.exog])
    for k, c in enumerate(design.endog_names):
        sol = lstsq(Zf, design.endog[:, k], design.excluded_names + design.exog_names)
        coefs[c] = {z: float(v) for z, v in zip(design.excluded_names, sol.coef)}
    return FirstStageReport(design.endog_names, sw, stats.f.sf(sw, df1, df2), ap,
                            stats.f.sf(ap, df1, df2), (df1, df2), coefs)


# ----------------------------------------------------------------- bootstrap


@dataclass
class BootstrapResult:
    B: int
    seed: int
    names: list
    estimate: np.ndarray
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    p_value: np.ndarray
    draws: np.ndarray  # (successful replications, statistics)
    replications: np.ndarray  # indices of successful replications
    failures: int

    def table(self) -> pd.DataFrame:
        return pd.DataFrame({"statistic": self.names, "estimate": self.estimate, "se": self.se,
                             "ci_low": self.ci_low, "ci_high": self.ci_high, "p_value": self.p_value})

    def get(self, name: str) -> dict:
        k = self.names.index(name)
        return {"estimate": float(self.estimate[k]), "se": float(self.se[k]),
                "ci_low": float(self.ci_low[k]), "ci_high": float(self.ci_high[k]),
                "p_value": float(self.p_value[k])}

    def to_json(self) -> dict:
        return {"B": self.B, "seed": self.seed, "failures": self.failures,
                "successful": int(self.replications.size),
                "statistics": {n: self.get(n) for n in self.names}}


class _Blocks:
    """Per-market design blocks, in canonical (sorted) market order."""

    def __init__(self, design: Design):
        order = np.argsort(design.markets.astype(str), kind="stable")
        self.design = design
        markets = design.markets[order].astype(str)
        self.ids, starts = np.unique(markets, return_index=True)
        self.order = order
        self.bounds = list(zip(starts, list(starts[1:]) + [markets.size]))

    def resample(self, picks: np.ndarray) -> Design:
        d = self.design
        idx = np.concatenate([self.order[a:b] for a, b in (self.bounds[p] for p in picks)])
        seen = {}
        labels = []
        for p in picks:
            k = seen.get(p, 0)
            seen[p] = k + 1
            a, b = self.bounds[p]
            labels.extend([f"{self.ids[p]}#{k}" if k else str(self.ids[p])] * (b - a))
        exog = d.exog[idx]
        # columns that are all zero in the resample (flags, absent quarters) drop out
        keep = [j for j, name in enumerate(d.exog_names)
                if name == "const" or name == "dy_lag1" or np.any(exog[:, j] != 0)]
        return Design(d.y[idx], d.endog[idx], None if d.excluded is None else d.excluded[idx],
                      exog[:, keep], d.endog_names, d.excluded_names,
                      [d.exog_names[j] for j in keep], np.asarray(labels, dtype=object), d.quarters[idx])


def _replicate(args):
    blocks, spec, seed, reps, horizon, convention, names = args
    out = []
    n = len(blocks.ids)
    for r in reps:
        rng = np.random.default_rng([seed, r])
        picks = rng.integers(0, n, size=n)
        try:
            stat = fit_design(blocks.resample(picks), spec).statistics(horizon, convention)
            out.append((r, np.array([stat[k] for k in names])))
        except (NumericalError, np.linalg.LinAlgError) as exc:
            log.debug("replication %d failed: %s", r, exc)
            out.append((r, None))
    return out


def bootstrap_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValidationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def cluster_bootstrap(data, spec: ModelSpec, B: int = 499, seed: int = 0,
                      statistics: Sequence[str] | None = None, horizon: int = 12,
                      threads: int | None = None, design: Design | None = None,
                      point: FitResult | None = None, convention: str = "recursion") -> BootstrapResult:
    """Resample whole markets with replacement and refit ``B`` times.

    Replication ``r`` draws its markets with ``default_rng([seed, r])`` from
    the markets sorted by id, so results depend only on ``(seed, r)`` and not
    on row order. Duplicated markets are relabelled ``id#k``. Failed refits
    are dropped; more than 5% failures raise :class:`NumericalError`.
    """
    if B < 2:
        raise ValidationError("B must be at least 2")
    design = design if design is not None else build_design(data, spec)
    point = point if point is not None else fit_design(design, spec)
    all_stats = point.statistics(horizon, convention)
    names = list(all_stats) if statistics is None else list(statistics)
    unknown = [s for s in names if s not in all_stats]
    if unknown:
        raise ValidationError(f"unknown statistics {unknown}")
    blocks = _Blocks(design)
    threads = threads or bootstrap_threads()
    reps = list(range(B))
    if threads > 1:
        chunks = [reps[i::threads] for i in range(threads)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = pool.map(_replicate, [(blocks, spec, seed, c, horizon, convention, names) for c in chunks])
            results = sorted((x for part in parts for x in part), key=lambda t: t[0])
    else:
        results = _replicate((blocks, spec, seed, reps, horizon, convention, names))
    ok = [(r, v) for r, v in results if v is not None]
    failures = B - len(ok)
    if failures > MAX_FAILURE_SHARE * B:
        raise NumericalError(f"bootstrap aborted: {failures} of {B} replications failed")
    draws = np.vstack([v for _, v in ok]) if ok else np.empty((0, len(names)))
    est = np.array([all_stats[k] for k in names])
    se = draws.std(axis=0, ddof=1)
    lo, hi = np.percentile(draws, [2.5, 97.5], axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, np.abs(est) / se, np.where(est == 0, 0.0, np.inf))
    p = 2.0 * stats.norm.sf(z)
    return BootstrapResult(B, seed, names, est, se, lo, hi, p, draws,
                           np.array([r for r, _ in ok], dtype=np.int64), failures)


def write_diagnostics(directory, report: FirstStageReport | None = None,
                      boot: BootstrapResult | None = None, replications: bool = True) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    if report is not None:
        (root / "firststage.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    if boot is not None:
        (root / "bootstrap.json").write_text(json.dumps(boot.to_json(), indent=2, sort_keys=True) + "\n")
        if replications:
            df = pd.DataFrame(boot.draws, columns=boot.names)
            df.insert(0, "replication", boot.replications)
            df.to_csv(root / "replications.csv", index=False, float_format="%.17g", lineterminator="\n")

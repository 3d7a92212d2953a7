"""Monte Carlo studies on synthetic worlds.

A study fixes one geography, delineation and selection and redraws the panel
shocks per replicate (``gen_market_panel(..., replicate=r)``), so replicate
``r`` is reproducible on its own.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .delineate import Delineation, Stop, delineate
from .diagnose import cluster_bootstrap, first_stage_design
from .errors import NumericalError
from .estimate import ModelSpec, build_design, fit_design
from .geo import Geography
from .overlap import OverlapTable, Selection, compute_overlaps, select_markets
from .panel import PROGRAMS, aggregate_panel, apply_censoring, build_regression_dataset
from .quarters import parse_quarter
from .simgen import DGPConfig, gen_geography, gen_market_panel, truth_record

ESTIMATION_WINDOW = ("2005Q1", "2018Q1")


@dataclass
class World:
    cfg: DGPConfig
    geo: Geography
    delineation: Delineation
    overlaps: OverlapTable
    selection: Selection

    @property
    def markets(self):
        return self.delineation.markets


def prepare_world(cfg: DGPConfig, stage1_regions: int | None = None,
                  stop: Stop = Stop(threshold=0.95), criterion: str = "main") -> World:
    geo = gen_geography(cfg)
    target = stage1_regions or max(1, int(round(0.6 * geo.n)))
    d = delineate(geo, target, stop)
    ov = compute_overlaps(d.markets, geo.timeline, geo.rlf)
    return World(cfg, geo, d, ov, select_markets(ov, criterion))


def replicate_dataset(world: World, r: int, cfg: DGPConfig | None = None, q: int | None = None,
                      window=ESTIMATION_WINDOW, outcome: str = "unemployment"):
    cfg = cfg or world.cfg
    cube, _, _ = gen_market_panel(world.geo, world.markets, cfg, replicate=r)
    panel = apply_censoring(aggregate_panel(cube, world.markets, world.overlaps,
                                            markets=world.selection.kept))
    win = tuple(parse_quarter(v) for v in window)
    return build_regression_dataset(panel, outcome, cfg.q if q is None else q, window=win)


def identification_study(world: World, n_worlds: int, endogeneity: bool = True,
                         estimators=("ols", "tsls"), lagged_dependent: bool = True) -> pd.DataFrame:
    """Long-run estimates per replicate, estimator and program."""
    cfg = world.cfg if endogeneity else replace(world.cfg, endogeneity={p: 0.0 for p in PROGRAMS})
    rows = []
    for r in range(n_worlds):
        data = replicate_dataset(world, r, cfg)
        for est in estimators:
            spec = ModelSpec(q=cfg.q, estimator=est, lagged_dependent=lagged_dependent)
            res = fit_design(build_design(data, spec), spec)
            for p, v in zip(spec.programs, res.long_run()):
                rows.append({"replicate": r, "estimator": est, "program": p, "long_run": float(v)})
    return pd.DataFrame(rows)


def summarize(estimates: pd.DataFrame, truth: dict) -> pd.DataFrame:
    """Mean, Monte Carlo standard error and z score against the truth."""
    g = estimates.groupby(["estimator", "program"], sort=True)["long_run"]
    out = g.agg(mean="mean", sd="std", n="count").reset_index()
    out["truth"] = out["program"].map(truth)
    out["mc_se"] = out["sd"] / np.sqrt(out["n"])
    out["z"] = (out["mean"] - out["truth"]) / out["mc_se"]
    return out


def null_first_stage(world: World, n_reps: int, seed: int = 0) -> np.ndarray:
    """SW p-values when the excluded instruments are replaced by pure noise.

    Returns an array of shape (n_reps, endogenous columns).
    """
    out = []
    spec = ModelSpec(q=world.cfg.q, estimator="tsls")
    for r in range(n_reps):
        data = replicate_dataset(world, r)
        design = build_design(data, spec)
        rng = np.random.default_rng([seed, r])
        design.excluded = rng.normal(size=design.excluded.shape)
        out.append(first_stage_design(design).sw_p)
    return np.vstack(out)


def coverage_study(world: World, n_worlds: int, B: int = 199, seed: int = 0) -> pd.DataFrame:
    """Whether the bootstrap percentile interval covers the true long-run effect."""
    truth = truth_record(world.cfg).long_run
    spec = ModelSpec(q=world.cfg.q, estimator="tsls")
    names = [f"long_run:{p}" for p in spec.programs]
    rows = []
    for r in range(n_worlds):
        data = replicate_dataset(world, r)
        try:
            boot = cluster_bootstrap(data, spec, B=B, seed=seed + r, statistics=names)
        except NumericalError:
            continue
        for k, p in enumerate(spec.programs):
            rows.append({"replicate": r, "program": p, "estimate": boot.estimate[k], "se": boot.se[k],
                         "ci_low": boot.ci_low[k], "ci_high": boot.ci_high[k],
                         "covered": bool(boot.ci_low[k] <= truth[p] <= boot.ci_high[k])})
    return pd.DataFrame(rows)

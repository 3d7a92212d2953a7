"""Command-line pipeline: simulate, delineate, overlap, build-panel, estimate, report.

Every command reads the same YAML config and writes only under the output
directory::

    <out>/world/        geography CSVs, micro.csv or counts.csv, truth.json, dgp.json
    <out>/delineate/    partition.csv, dendrogram.csv, regions.csv, regions_dendrogram.csv,
                        esc.csv, metrics.json, definitions.csv
    <out>/overlap/      overlaps.csv, markets.csv, selection.json
    <out>/panel/        panel.csv
    <out>/estimate/<outcome>/<estimator>/
                        fit.json, effects.csv, bootstrap.json, replications.csv, firststage.json
    <out>/report/       cumulative_effects.csv, summary.txt

Exit status is 0 on success, 1 on invalid input and 2 on numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .config import RunConfig
from .delineate import (RegionPartition, definition_table, delineate, esc_stats, read_partition,
                        write_partition)
from .diagnose import cluster_bootstrap, first_stage_design, write_diagnostics
from .errors import NumericalError, ValidationError
from .estimate import ModelSpec, build_design, fit_design, write_fit
from .geo import FILE_NAMES, GeoConfig, load_geography, write_geography
from .overlap import compute_overlaps, select_markets, write_overlaps
from .panel import (CensorPolicy, aggregate_panel, apply_censoring, build_regression_dataset,
                    count_spells, read_counts, read_micro, read_panel, write_counts, write_micro,
                    write_panel)
from .simgen import gen_geography, gen_market_panel, gen_micro_panel, write_truth

log = logging.getLogger("zoneforge")

CSV = {"index": False, "lineterminator": "\n", "float_format": "%.17g"}


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_json(path: Path):
    if not path.exists():
        raise ValidationError(f"input file not found: {path} (run the upstream command first)")
    return json.loads(path.read_text())


# ------------------------------------------------------------------- inputs


def _geography(cfg: RunConfig):
    i = cfg.inputs
    gc = GeoConfig(window=cfg.panel.quarters(), adjacency_seconds=i.adjacency_seconds)
    if i.geography:
        root = cfg.resolve(i.geography)
        if not root.is_dir():
            raise ValidationError(f"geography directory not found: {root}")
        return load_geography(root, gc)
    files = {k: getattr(i, k) for k in FILE_NAMES}
    if any(files.values()):
        return load_geography({k: cfg.resolve(v) if v else None for k, v in files.items()}, gc)
    root = cfg.out / "world"
    if not root.is_dir():
        raise ValidationError(f"no geography inputs configured and {root} does not exist; "
                              "set inputs.geography or run 'simulate' first")
    return load_geography(root, gc)


def _markets(cfg: RunConfig, geo) -> RegionPartition:
    part = read_partition(cfg.out / "delineate" / "partition.csv")
    extra = set(part.municipality_ids) - set(geo.ids)
    if extra:
        raise ValidationError(f"partition names unknown municipality {sorted(extra)[0]!r}")
    return RegionPartition.from_mapping(geo.ids, part.mapping())


def _counts(cfg: RunConfig, geo):
    i = cfg.inputs
    window = cfg.panel.quarters()
    subgroups = tuple(cfg.panel.subgroups)
    world = cfg.out / "world"
    micro_path = cfg.resolve(i.micro) if i.micro else None
    counts_path = cfg.resolve(i.counts) if i.counts else None
    if micro_path is None and counts_path is None:
        if (world / "micro.csv").exists():
            micro_path = world / "micro.csv"
        elif (world / "counts.csv").exists():
            counts_path = world / "counts.csv"
        else:
            raise ValidationError(f"no micro or counts input configured and none found in {world}")
    if micro_path is not None:
        return count_spells(read_micro(micro_path), geo.ids, window, subgroups)
    if subgroups:
        raise ValidationError("subgroup outcomes need person-level micro records")
    return read_counts(counts_path, geo.ids).window(*window)


# ----------------------------------------------------------------- commands


def cmd_simulate(cfg: RunConfig) -> None:
    seed = cfg.require_seed("simulate")
    dgp = cfg.world.dgp_config(seed)
    dgp.window = tuple(str(v) for v in cfg.panel.window)
    dgp.validate()
    geo = gen_geography(dgp)
    stage1 = cfg.delineate.stage1_list(geo.n)[0]
    markets = delineate(geo, stage1, cfg.delineate.stop_rule()).markets
    root = cfg.out / "world"
    write_geography(geo, root)
    if cfg.world.micro:
        micro, truth, _ = gen_micro_panel(geo, markets, dgp)
        write_micro(micro, root / "micro.csv")
    else:
        cube, truth, _ = gen_market_panel(geo, markets, dgp)
        write_counts(cube, root / "counts.csv")
    write_truth(truth, root / "truth.json")
    _dump(root / "dgp.json", dgp.to_dict())
    log.info("simulated %d municipalities, %d markets", geo.n, markets.n_regions)


def cmd_delineate(cfg: RunConfig) -> None:
    geo = _geography(cfg)
    sizes = cfg.delineate.stage1_list(geo.n)
    stop = cfg.delineate.stop_rule()
    d = delineate(geo, sizes[0], stop)
    root = cfg.out / "delineate"
    sc = esc_stats(d.markets, geo.flows)
    rlf = np.bincount(d.markets.labels, weights=geo.rlf.astype(np.float64))
    metrics = {"stage1_regions": sizes[0], "n_regions": d.regions.n_regions,
               "n_markets": d.markets.n_regions, "stop": cfg.delineate.stop,
               "rlf_mean": float(rlf.mean()), "similarity_warnings": list(d.similarity.warnings),
               "input_notes": list(geo.notes), **sc.summary()}
    write_partition(root, d.regions, d.region_dendrogram, stem="regions")
    write_partition(root, d.markets, d.market_dendrogram, metrics)
    pd.DataFrame({"market": list(d.markets.region_ids), "rlf": rlf.astype(np.int64),
                  "esc": sc.esc}).to_csv(root / "esc.csv", **CSV)
    table = definition_table(geo, sizes, cfg.delineate.table_stops)
    table.to_csv(root / "definitions.csv", **CSV)
    log.info("%d markets from %d stage-1 regions", d.markets.n_regions, d.regions.n_regions)


def cmd_overlap(cfg: RunConfig) -> None:
    geo = _geography(cfg)
    if geo.timeline is None:
        raise ValidationError("the overlap step needs an agency assignment file (agencies.csv)")
    markets = _markets(cfg, geo)
    ov = compute_overlaps(markets, geo.timeline, geo.rlf)
    sel = select_markets(ov, cfg.overlap.selection_criterion())
    root = cfg.out / "overlap"
    write_overlaps(root, ov, sel)
    ov.markets.to_csv(root / "markets.csv", **CSV)
    log.info("%d of %d markets kept under %s", len(sel.kept), markets.n_regions, sel.criterion.name)


def cmd_build_panel(cfg: RunConfig) -> None:
    geo = _geography(cfg)
    markets = _markets(cfg, geo)
    kept = _load_json(cfg.out / "overlap" / "selection.json")["kept"]
    if not kept:
        raise ValidationError("no market passes the selection criterion")
    cube = _counts(cfg, geo)
    ov = compute_overlaps(markets, geo.timeline, geo.rlf)
    panel = aggregate_panel(cube, markets, ov, markets=kept)
    t = cfg.panel.censor_threshold
    panel = apply_censoring(panel, CensorPolicy(threshold=max(t, 1), enabled=t > 0))
    root = cfg.out / "panel"
    root.mkdir(parents=True, exist_ok=True)
    write_panel(panel, root / "panel.csv")
    log.info("panel with %d markets x %d quarters", len(kept), cube.data.shape[1])


def _spec(cfg: RunConfig, outcome: str, estimator: str) -> ModelSpec:
    e = cfg.estimate
    return ModelSpec(outcome=outcome, q=e.q, estimator="ols" if estimator == "ols" else "tsls",
                     lagged_dependent=e.lagged_dependent and estimator != "dl",
                     controls=e.controls, fixed_effects=e.fixed_effects)


def cmd_estimate(cfg: RunConfig) -> None:
    seed = cfg.require_seed("estimate")
    e = cfg.estimate
    panel = read_panel(cfg.out / "panel" / "panel.csv")
    for outcome in e.outcomes:
        data = build_regression_dataset(panel, outcome, e.q, window=e.quarters())
        for est in e.estimators:
            spec = _spec(cfg, outcome, est)
            design = build_design(data, spec)
            res = fit_design(design, spec)
            root = cfg.out / "estimate" / outcome / est
            write_fit(root, res, data, e.horizon, e.irf_convention)
            report = first_stage_design(design) if spec.estimator == "tsls" else None
            boot = cluster_bootstrap(data, spec, B=e.B, seed=seed, horizon=e.horizon, design=design,
                                     point=res, convention=e.irf_convention)
            write_diagnostics(root, report, boot)
            log.info("%s/%s: %d rows, %d bootstrap failures", outcome, est, res.n_obs, boot.failures)


def _row(label, stat, boots):
    cells = []
    for b in boots:
        if b is None or stat not in b["statistics"]:
            cells.append(f"{'':>10}{'':>10}{'':>8}")
        else:
            s = b["statistics"][stat]
            cells.append(f"{s['estimate']:>10.4f}{s['se']:>10.4f}{s['p_value']:>8.3f}")
    return f"{label:<26}" + "  ".join(cells)


def cmd_report(cfg: RunConfig) -> None:
    e = cfg.estimate
    rows, lines = [], []
    for outcome in e.outcomes:
        boots, fits = [], []
        for est in e.estimators:
            root = cfg.out / "estimate" / outcome / est
            fit = _load_json(root / "fit.json")
            boot = _load_json(root / "bootstrap.json")
            eff = pd.read_csv(root / "effects.csv")
            fits.append(fit)
            boots.append(boot)
            for r in eff.itertuples(index=False):
                s = boot["statistics"].get(f"cumulative:{r.program}:{r.horizon}", {})
                rows.append({"outcome": outcome, "estimator": est, "program": r.program,
                             "horizon": int(r.horizon), "cumulative": r.cumulative,
                             "se": s.get("se", np.nan), "ci_low": s.get("ci_low", np.nan),
                             "ci_high": s.get("ci_high", np.nan)})
        lines.append(f"outcome: {outcome}")
        lines.append("  ".join(f"{est}: {f['n_markets']} markets, {f['n_obs']} obs, B={b['B']}"
                               for est, f, b in zip(e.estimators, fits, boots)))
        lines.append(f"{'':<26}" + "  ".join(f"{est:^28}" for est in e.estimators))
        lines.append(f"{'':<26}" + "  ".join(f"{'effect':>10}{'se':>10}{'p-val':>8}" for _ in e.estimators))
        lines.append(_row("theta", "theta", boots))
        for p in fits[0]["spec"]["programs"]:
            lines.append(_row(f"{p} st", f"short_run:{p}", boots))
            lines.append(_row(f"{p} lt", f"long_run:{p}", boots))
        lines.append("")
    root = cfg.out / "report"
    root.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(root / "cumulative_effects.csv", **CSV)
    (root / "summary.txt").write_text("\n".join(lines))


COMMANDS = {
    "simulate": cmd_simulate,
    "delineate": cmd_delineate,
    "overlap": cmd_overlap,
    "build-panel": cmd_build_panel,
    "estimate": cmd_estimate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zoneforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="overrides the config output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ValidationError("--seed must be non-negative")
            cfg.seed = args.seed
        if args.out is not None:
            cfg.output = str(Path(args.out).resolve())
        COMMANDS[args.command](cfg)
    except ValidationError as exc:
        print(f"zoneforge {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"zoneforge {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

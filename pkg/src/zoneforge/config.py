"""Run configuration: one YAML document drives every command.

Precedence is command-line flag, then config value, then the defaults below.
Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .delineate import Stop
from .errors import ValidationError
from .overlap import CRITERIA, SelectionCriterion
from .panel import ATTRIBUTES, OUTCOMES
from .quarters import parse_quarter
from .simgen import DGPConfig, demo_config

ESTIMATORS = ("ols", "tsls", "dl")
CONVENTIONS = ("recursion", "level_shift")


def _section(cls, raw, where):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ValidationError(f"config section {where!r} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ValidationError(f"config section {where!r}: unknown key(s) {unknown}")
    return cls(**raw)


def _window(value, where):
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ValidationError(f"{where} must be a [start, stop) pair of quarters")
    start, stop = (parse_quarter(str(v)) for v in value)
    if stop <= start:
        raise ValidationError(f"{where} is empty")
    return start, stop


@dataclass
class WorldSection:
    preset: str = "demo"  # demo | default
    micro: bool = True
    dgp: dict = field(default_factory=dict)

    def dgp_config(self, seed: int) -> DGPConfig:
        if self.preset == "demo":
            base = demo_config(seed)
        elif self.preset == "default":
            base = DGPConfig(seed=seed)
        else:
            raise ValidationError(f"world.preset must be 'demo' or 'default', got {self.preset!r}")
        merged = {**base.to_dict(), **dict(self.dgp), "seed": seed}
        cfg = DGPConfig.from_dict(merged)
        cfg.validate()
        return cfg


@dataclass
class InputSection:
    geography: str | None = None  # directory with the standard file names
    municipalities: str | None = None
    flows: str | None = None
    distances: str | None = None
    adjacency: str | None = None
    agencies: str | None = None
    micro: str | None = None
    counts: str | None = None
    adjacency_seconds: float = 900.0


@dataclass
class DelineateSection:
    stage1_regions: object = None  # int, list of ints, or None for 60% of municipalities
    stop: dict = field(default_factory=lambda: {"threshold": 0.95})
    table_stops: list = field(default_factory=lambda: [0.90, 0.95, 0.98])

    def stage1_list(self, n_municipalities: int) -> list:
        raw = self.stage1_regions
        if raw is None:
            return [max(1, int(round(0.6 * n_municipalities)))]
        vals = raw if isinstance(raw, list) else [raw]
        if not vals or any(not isinstance(v, int) or v < 1 for v in vals):
            raise ValidationError("delineate.stage1_regions must be a positive integer or a list of them")
        return list(vals)

    def stop_rule(self) -> Stop:
        if not isinstance(self.stop, dict) or len(self.stop) != 1:
            raise ValidationError("delineate.stop must be {threshold: c} or {count: k}")
        (key, value), = self.stop.items()
        if key == "threshold":
            return Stop(threshold=float(value))
        if key == "count":
            return Stop(count=int(value))
        raise ValidationError(f"delineate.stop: unknown rule {key!r}")


@dataclass
class OverlapSection:
    criterion: object = "main"  # name or {name: ..., <parameter>: value}

    def selection_criterion(self) -> SelectionCriterion:
        c = self.criterion
        if isinstance(c, str):
            return SelectionCriterion.named(c)
        if isinstance(c, dict) and "name" in c:
            rest = {k: v for k, v in c.items() if k != "name"}
            return SelectionCriterion.named(c["name"], **rest)
        raise ValidationError(f"overlap.criterion must be one of {sorted(CRITERIA)} or a mapping with 'name'")


@dataclass
class PanelSection:
    window: list = field(default_factory=lambda: ["2000Q1", "2018Q1"])
    censor_threshold: int = 3  # 0 disables censoring
    subgroups: list = field(default_factory=list)

    def quarters(self):
        return _window(self.window, "panel.window")


@dataclass
class EstimateSection:
    outcomes: list = field(default_factory=lambda: ["unemployment"])
    estimators: list = field(default_factory=lambda: ["ols", "tsls"])
    q: int = 6
    window: list = field(default_factory=lambda: ["2005Q1", "2018Q1"])
    lagged_dependent: bool = True
    controls: list | None = None
    fixed_effects: bool = True
    B: int = 499
    horizon: int = 12
    irf_convention: str = "recursion"

    def quarters(self):
        return _window(self.window, "estimate.window")


@dataclass
class RunConfig:
    seed: int | None = None
    output: str = "out"
    world: WorldSection = field(default_factory=WorldSection)
    inputs: InputSection = field(default_factory=InputSection)
    delineate: DelineateSection = field(default_factory=DelineateSection)
    overlap: OverlapSection = field(default_factory=OverlapSection)
    panel: PanelSection = field(default_factory=PanelSection)
    estimate: EstimateSection = field(default_factory=EstimateSection)
    base_dir: Path = field(default=Path("."), repr=False)

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".") -> "RunConfig":
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ValidationError("config must be a mapping")
        sections = {"world": WorldSection, "inputs": InputSection, "delineate": DelineateSection,
                    "overlap": OverlapSection, "panel": PanelSection, "estimate": EstimateSection}
        unknown = sorted(set(raw) - set(sections) - {"seed", "output"})
        if unknown:
            raise ValidationError(f"config: unknown key(s) {unknown}")
        cfg = cls(seed=raw.get("seed"), output=str(raw.get("output", "out")),
                  base_dir=Path(base_dir),
                  **{k: _section(c, raw.get(k), k) for k, c in sections.items()})
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ValidationError(f"{path}: cannot parse YAML ({exc})") from None
        return cls.from_dict(raw, base_dir=path.parent)

    def validate(self) -> None:
        if self.seed is not None and (not isinstance(self.seed, int) or self.seed < 0):
            raise ValidationError("seed must be a non-negative integer")
        e = self.estimate
        bad = [o for o in e.outcomes if o.split("__")[0] not in OUTCOMES]
        if bad or not e.outcomes:
            raise ValidationError(f"estimate.outcomes: unknown {bad}; expected some of {sorted(OUTCOMES)}")
        bad = [x for x in e.estimators if x not in ESTIMATORS]
        if bad or not e.estimators:
            raise ValidationError(f"estimate.estimators: unknown {bad}; expected some of {list(ESTIMATORS)}")
        if e.irf_convention not in CONVENTIONS:
            raise ValidationError(f"estimate.irf_convention must be one of {list(CONVENTIONS)}")
        if not isinstance(e.q, int) or e.q < 0:
            raise ValidationError("estimate.q must be a non-negative integer")
        if not isinstance(e.B, int) or e.B < 2:
            raise ValidationError("estimate.B must be an integer of at least 2")
        if not isinstance(e.horizon, int) or e.horizon < 0:
            raise ValidationError("estimate.horizon must be a non-negative integer")
        e.quarters()
        self.panel.quarters()
        bad = [a for a in self.panel.subgroups if a not in ATTRIBUTES]
        if bad:
            raise ValidationError(f"panel.subgroups: unknown attribute(s) {bad}")
        if not isinstance(self.panel.censor_threshold, int) or self.panel.censor_threshold < 0:
            raise ValidationError("panel.censor_threshold must be a non-negative integer")
        self.delineate.stop_rule()
        self.overlap.selection_criterion()

    def require_seed(self, command: str) -> int:
        if self.seed is None:
            raise ValidationError(f"{command} needs a seed (config 'seed' or --seed)")
        return self.seed

    def resolve(self, path) -> Path:
        """Paths in the config are relative to the config file."""
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out(self) -> Path:
        return self.resolve(self.output)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

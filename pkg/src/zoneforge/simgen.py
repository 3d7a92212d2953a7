"""Deterministic synthetic worlds with known policy effects.

Random streams are split by ``numpy.random.default_rng([seed, stream, *extra])``
with fixed stream ids (see ``STREAM``), so every component can be redrawn on
its own and Monte Carlo replicate ``r`` uses ``[seed, STREAM["panel"], r]``.

Geography: municipalities are scattered around city centres on a square;
driving times are straight-line distances at a fixed speed and detour
factor; adjacency is the Delaunay triangulation; each resident picks a
workplace among the ``n_destinations`` nearest municipalities with gravity
weights ``size_j ** size_elasticity * exp(-decay * km_ij)`` (own municipality
weighted by ``home_bias``). Agencies are Voronoi cells around random seed
municipalities, so their borders ignore commuting ties.

Outcome law per labour market ``M`` (``D`` is the four-quarter difference):

    Dy_Mt = theta * Dy_M,t-1 + sum_p sum_j phi_pj * DX_pM,t-j + mu_t + eps_Mt

Policy rate of program ``p`` in municipality ``i`` (agency ``a``):

    x_pit = base_p + alpha_pa + s_pat + tau_pt + kappa_p * ybar_a,t-1
            + lambda_p * eps_M(i),t + eta_pit

with agency style ``alpha``, AR(1) agency shocks ``s``, a common trend
``tau``, the lagged unemployment rate of the agency's jurisdiction ``ybar``
and municipal noise ``eta``. ``X_pMt`` is the UI-weighted mean of ``x_pit``
over the market; municipal UI stocks are ``y_Mt * c_i * rlf_i`` with fixed
factors ``c_i`` normalised within the market, which keeps those weights
constant over time and makes the law hold exactly for the latent rates.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.spatial import Delaunay, cKDTree
from scipy.spatial.distance import pdist, squareform

from .delineate import RegionPartition
from .errors import ValidationError
from .estimate import impulse_response, long_run_effect
from .geo import AgencySegment, AgencyTimeline, Geography
from .panel import (ATTRIBUTES, BASE_COUNTS, OTHER_PROGRAMS, PROGRAMS, CountCube,
                    count_columns)
from .quarters import parse_quarter

STREAM = {"geography": 1, "agencies": 2, "panel": 3, "micro": 4}

DEFAULT_PHI = {
    "training": (0.02, 0.01, 0.0, -0.01, -0.02, -0.02, -0.02),
    "short_measure": (0.0,) * 7,
    "wage_subsidy": (-0.03, -0.02, -0.01, -0.01, 0.0, 0.0, 0.0),
}


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAM[name], *map(int, extra)])


@dataclass
class DGPConfig:
    seed: int = 0
    # geography
    n_municipalities: int = 600
    n_cities: int = 30
    side_km: float = 200.0
    city_spread_km: float = 7.0
    rural_share: float = 0.3
    rlf_mean: float = 30000.0
    rlf_sigma: float = 0.7
    rlf_min: int = 20
    size_elasticity: float = 1.0
    distance_decay: float = 0.15  # per km
    home_bias: float = 3.0
    n_destinations: int = 12
    speed_kmh: float = 60.0
    detour: float = 1.3
    # agencies
    n_agencies: int = 40
    reform_quarter: str | None = "2012Q4"
    reform_merges: int = 2
    # time
    window: tuple = ("2000Q1", "2018Q1")
    burn_in: int = 24
    # outcome law
    theta: float = 0.6
    q: int = 6
    phi: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_PHI.items()})
    eps_sd: float = 0.0008
    mu_sd: float = 0.0005
    y_range: tuple = (0.07, 0.10)
    municipal_sd: float = 0.2  # lognormal sd of the fixed municipal factors c_i
    # policy rates
    program_base: dict = field(default_factory=lambda: {
        "training": 0.15, "short_measure": 0.12, "wage_subsidy": 0.10})
    style_sd: float = 0.02
    shock_sd: float = 0.02
    shock_rho: float = 0.3
    trend_sd: float = 0.002
    trend_rho: float = 0.9
    noise_sd: float = 0.004
    response: dict = field(default_factory=lambda: {
        "training": 0.3, "short_measure": 0.2, "wage_subsidy": 0.1})
    endogeneity: dict = field(default_factory=lambda: {
        "training": 10.0, "short_measure": 0.0, "wage_subsidy": 0.0})
    # other states and programs
    other_program_base: dict = field(default_factory=lambda: {
        "other_ltu": 0.05, "other_young": 0.03, "other": 0.06})
    other_program_sd: float = 0.01
    welfare_range: tuple = (0.03, 0.06)
    eob_range: tuple = (0.01, 0.03)
    out_range: tuple = (0.03, 0.06)
    state_sd: float = 0.002

    def validate(self) -> None:
        if not abs(self.theta) < 1:
            raise ValidationError(f"explosive configuration: |theta| = {abs(self.theta)} must be below 1")
        if self.q < 0:
            raise ValidationError("q must be non-negative")
        for p in PROGRAMS:
            if p not in self.phi:
                raise ValidationError(f"phi missing program {p!r}")
            if len(self.phi[p]) != self.q + 1:
                raise ValidationError(f"phi[{p!r}] needs q+1 = {self.q + 1} entries")
        if self.n_municipalities < 3:
            raise ValidationError("need at least 3 municipalities")
        if not 1 <= self.n_agencies <= self.n_municipalities:
            raise ValidationError("n_agencies must lie in 1..n_municipalities")
        if self.n_destinations < 1:
            raise ValidationError("n_destinations must be positive")

    @property
    def quarters(self) -> tuple:
        return parse_quarter(self.window[0]), parse_quarter(self.window[1])

    @classmethod
    def from_dict(cls, values: dict) -> "DGPConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(values) - known
        if unknown:
            raise ValidationError(f"unknown DGP settings {sorted(unknown)}")
        cfg = cls(**values)
        cfg.window = tuple(cfg.window)
        cfg.y_range = tuple(cfg.y_range)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ geography


def gen_geography(cfg: DGPConfig) -> Geography:
    cfg.validate()
    rng = stream(cfg.seed, "geography")
    n = cfg.n_municipalities
    centres = rng.uniform(0.0, cfg.side_km, size=(cfg.n_cities, 2))
    weights = rng.dirichlet(np.full(cfg.n_cities, 2.0))
    city = rng.choice(cfg.n_cities, size=n, p=weights)
    pos = centres[city] + rng.normal(0.0, cfg.city_spread_km, size=(n, 2))
    rural = rng.random(n) < cfg.rural_share
    pos[rural] = rng.uniform(0.0, cfg.side_km, size=(int(rural.sum()), 2))
    pos = np.clip(pos, 0.0, cfg.side_km)
    pos += rng.normal(0.0, 1e-6, size=pos.shape)  # break exact duplicates for the triangulation

    mu = np.log(cfg.rlf_mean) - cfg.rlf_sigma ** 2 / 2
    rlf = np.maximum(np.rint(rng.lognormal(mu, cfg.rlf_sigma, size=n)), cfg.rlf_min).astype(np.int64)

    km = squareform(pdist(pos))
    seconds = km * (3600.0 / cfg.speed_kmh) * cfg.detour

    k = min(cfg.n_destinations + 1, n)
    dist, nbr = cKDTree(pos).query(pos, k=k)
    nbr = np.asarray(nbr).reshape(n, k)
    dkm = km[np.arange(n)[:, None], nbr]
    w = rlf[nbr].astype(np.float64) ** cfg.size_elasticity * np.exp(-cfg.distance_decay * dkm)
    w[nbr == np.arange(n)[:, None]] *= cfg.home_bias
    w /= w.sum(axis=1, keepdims=True)
    counts = rng.multinomial(rlf, w)
    flows = sparse.csr_matrix((counts.ravel(), (np.repeat(np.arange(n), k), nbr.ravel())), shape=(n, n))
    flows.eliminate_zeros()

    tri = Delaunay(pos).simplices
    a = np.concatenate([tri[:, 0], tri[:, 1], tri[:, 2]])
    b = np.concatenate([tri[:, 1], tri[:, 2], tri[:, 0]])
    adj = sparse.csr_matrix((np.ones(a.size, dtype=bool), (a, b)), shape=(n, n))
    adj = ((adj + adj.T) > 0).tocsr()
    adj.setdiag(False)
    adj.eliminate_zeros()

    width = len(str(n))
    ids = tuple(f"m{i + 1:0{width}d}" for i in range(n))
    timeline = gen_agencies(cfg, pos, rlf, adj)
    row = flows.sum(axis=1).A1.astype(np.int64)
    col = flows.sum(axis=0).A1.astype(np.int64)
    return Geography(ids, tuple(f"Municipality {i + 1}" for i in range(n)), row, col, flows,
                     seconds, adj, timeline)


def gen_agencies(cfg: DGPConfig, pos, rlf, adjacency) -> AgencyTimeline:
    """Voronoi agencies around random seeds, with an optional merger reform."""
    rng = stream(cfg.seed, "agencies")
    n = pos.shape[0]
    seeds = rng.choice(n, size=cfg.n_agencies, replace=False)
    _, owner = cKDTree(pos[seeds]).query(pos)
    width = len(str(cfg.n_agencies))
    names = np.array([f"A{k + 1:0{width}d}" for k in range(cfg.n_agencies)], dtype=object)
    start, stop = cfg.quarters
    first = owner.copy()
    if cfg.reform_quarter is None or cfg.reform_merges == 0:
        return AgencyTimeline((AgencySegment(start, stop, tuple(names[first])),))
    reform = parse_quarter(cfg.reform_quarter)
    if not start < reform < stop:
        raise ValidationError("reform quarter must lie inside the window")
    coo = sparse.triu(adjacency, k=1).tocoo()
    pairs = sorted({(min(x, y), max(x, y)) for x, y in zip(owner[coo.row], owner[coo.col]) if x != y})
    order = rng.permutation(len(pairs))
    used, merges = set(), []
    for k in order:
        x, y = pairs[k]
        if x in used or y in used:
            continue
        merges.append((x, y))
        used.update((x, y))
        if len(merges) == cfg.reform_merges:
            break
    second = owner.copy()
    for x, y in merges:
        second[second == y] = x
    return AgencyTimeline((AgencySegment(start, reform, tuple(names[first])),
                           AgencySegment(reform, stop, tuple(names[second]))))


# ---------------------------------------------------------------------- panel


@dataclass
class TruthRecord:
    theta: float
    q: int
    phi: dict
    long_run: dict
    cumulative: dict
    outcome: str = "unemployment"

    def to_json(self) -> dict:
        return asdict(self)


def truth_record(cfg: DGPConfig, horizon: int = 12) -> TruthRecord:
    phi = np.array([cfg.phi[p] for p in PROGRAMS], dtype=np.float64)
    lr = long_run_effect(phi.sum(axis=1), cfg.theta)
    _, cum = impulse_response(cfg.theta, phi, horizon)
    return TruthRecord(float(cfg.theta), cfg.q, {p: [float(v) for v in cfg.phi[p]] for p in PROGRAMS},
                       dict(zip(PROGRAMS, lr.tolist())),
                       {p: cum[k].tolist() for k, p in enumerate(PROGRAMS)})


@dataclass
class LatentPanel:
    """Exact market rates behind the emitted counts (quarters of the window)."""

    y: np.ndarray  # (markets, quarters)
    x: np.ndarray  # (programs, markets, quarters)
    eps: np.ndarray  # (markets, quarters)


def _agency_codes(timeline: AgencyTimeline, quarters: np.ndarray):
    names = sorted({a for seg in timeline.segments for a in seg.agency})
    index = {a: k for k, a in enumerate(names)}
    per_seg = [np.array([index[a] for a in seg.agency]) for seg in timeline.segments]
    seg_of = np.array([timeline.segment_index(min(max(t, timeline.start), timeline.stop - 1))
                       for t in quarters])
    return len(names), per_seg, seg_of


def _ar1(rng, shape, rho, sd, T):
    out = np.empty(shape + (T,))
    cur = rng.normal(0.0, sd / np.sqrt(1 - rho ** 2), size=shape)
    for t in range(T):
        cur = rho * cur + rng.normal(0.0, sd, size=shape)
        out[..., t] = cur
    return out


def gen_market_panel(geo: Geography, partition: RegionPartition, cfg: DGPConfig,
                     replicate: int | None = None) -> tuple[CountCube, TruthRecord, LatentPanel]:
    """Municipality counts (no composition columns) from the outcome law."""
    cfg.validate()
    if geo.timeline is None:
        raise ValidationError("geography has no agency timeline")
    if tuple(partition.municipality_ids) != tuple(geo.ids):
        raise ValidationError("partition does not match the geography")
    extra = () if replicate is None else (replicate,)
    rng = stream(cfg.seed, "panel", *extra)
    start, stop = cfg.quarters
    T, burn = stop - start, cfg.burn_in
    TT = T + burn
    quarters = np.arange(start - burn, stop)
    n, K = geo.n, partition.n_regions
    mk = partition.labels
    rlf = geo.rlf.astype(np.float64)
    P = len(PROGRAMS)

    def factors():
        c = rng.lognormal(0.0, cfg.municipal_sd, size=n)
        scale = np.bincount(mk, weights=rlf, minlength=K) / np.bincount(mk, weights=c * rlf, minlength=K)
        return c * scale[mk]

    c_ui = factors()
    omega = c_ui * rlf / np.bincount(mk, weights=c_ui * rlf, minlength=K)[mk]

    n_ag, seg_codes, seg_of = _agency_codes(geo.timeline, quarters)
    alpha = rng.normal(0.0, cfg.style_sd, size=(P, n_ag))
    shocks = _ar1(rng, (P, n_ag), cfg.shock_rho, cfg.shock_sd, TT)
    trend = _ar1(rng, (P,), cfg.trend_rho, cfg.trend_sd, TT)
    eta = rng.normal(0.0, cfg.noise_sd, size=(P, n, TT))
    eps = rng.normal(0.0, cfg.eps_sd, size=(K, TT))
    mu = rng.normal(0.0, cfg.mu_sd, size=TT)
    y0 = rng.uniform(*cfg.y_range, size=K)
    base = np.array([cfg.program_base[p] for p in PROGRAMS])[:, None]
    kappa = np.array([cfg.response.get(p, 0.0) for p in PROGRAMS])[:, None]
    lam = np.array([cfg.endogeneity.get(p, 0.0) for p in PROGRAMS])[:, None]
    phi = np.array([cfg.phi[p] for p in PROGRAMS], dtype=np.float64)

    y = np.zeros((K, TT))
    dy = np.zeros((K, TT))
    X = np.zeros((P, K, TT))
    x_muni = np.zeros((P, n, TT))
    ui_w = c_ui * rlf
    for t in range(TT):
        ag = seg_codes[seg_of[t]]
        y_prev = y[:, t - 1] if t > 0 else y0
        ybar = np.bincount(ag, weights=ui_w * y_prev[mk], minlength=n_ag) / \
            np.maximum(np.bincount(ag, weights=ui_w, minlength=n_ag), 1e-300)
        x = (base + alpha[:, ag] + shocks[:, ag, t] + trend[:, t:t + 1] + kappa * ybar[ag][None, :]
             + lam * eps[mk, t][None, :] + eta[:, :, t])
        x = np.maximum(x, 0.0)
        x_muni[:, :, t] = x
        X[:, :, t] = np.stack([np.bincount(mk, weights=omega * x[p], minlength=K) for p in range(P)])
        if t < 4:
            y[:, t] = y0
            continue
        d = mu[t] + eps[:, t] + (cfg.theta * dy[:, t - 1] if t > 4 else 0.0)
        for j in range(cfg.q + 1):
            s = t - j
            if s >= 4:
                d = d + phi[:, j] @ (X[:, :, s] - X[:, :, s - 4])
        dy[:, t] = d
        y[:, t] = y[:, t - 4] + d

    if (y <= 0).any():
        raise ValidationError("generated unemployment rate is not positive; lower eps_sd or mu_sd")
    sl = slice(burn, TT)
    y, x_muni = y[:, sl], x_muni[:, :, sl]

    def state(lo_hi):
        level = rng.uniform(*lo_hi, size=K)[:, None] + _ar1(rng, (K,), 0.7, cfg.state_sd, T)
        return np.clip(level, 0.0, None)

    welfare, eob, out = state(cfg.welfare_range), state(cfg.eob_range), state(cfg.out_range)
    c_w, c_e, c_o = factors(), factors(), factors()
    other = {p: np.clip(b + rng.normal(0.0, cfg.other_program_sd, size=(n, T)), 0.0, None)
             for p, b in cfg.other_program_base.items()}

    r = rlf[:, None]
    ui_exact = y[mk] * c_ui[:, None] * r
    ui = np.minimum(np.rint(ui_exact), r)
    prog = {p: np.rint(x_muni[k] * ui_exact) for k, p in enumerate(PROGRAMS)}
    for p in OTHER_PROGRAMS:
        prog[p] = np.rint(other[p] * ui_exact)
    inside = ["training", "short_measure"] + list(OTHER_PROGRAMS)
    total = sum(prog[p] for p in inside)
    over = total > ui
    if over.any():  # shrink program counts so participants never exceed the UI stock
        for p in inside:
            prog[p] = np.where(over, np.floor(prog[p] * ui / np.maximum(total, 1)), prog[p])
    sub = prog["wage_subsidy"]
    wel = np.rint(welfare[mk] * c_w[:, None] * r)
    eo = np.rint(eob[mk] * c_e[:, None] * r)
    ou = np.rint(out[mk] * c_o[:, None] * r)
    used = ui + sub + wel + eo + ou
    excess = np.maximum(used - r, 0)
    ou = np.maximum(ou - excess, 0)
    unsub = r - (ui + sub + wel + eo + ou)
    if (unsub < 0).any():
        raise ValidationError("generated state counts exceed the resident labour force")
    values = {"rlf": np.broadcast_to(r, (n, T)), "ui": ui, "sub": sub, "welfare": wel, "eob": eo,
              "out": ou, "unsub": unsub, "emp": unsub + sub + eo, **prog}
    data = np.stack([values[c] for c in BASE_COUNTS], axis=-1).astype(np.int64)
    cube = CountCube(tuple(geo.ids), start, BASE_COUNTS, data)
    return cube, truth_record(cfg), LatentPanel(y, X[:, :, sl], eps[:, sl])


# ---------------------------------------------------------------------- micro


def gen_micro_panel(geo: Geography, partition: RegionPartition, cfg: DGPConfig
                    ) -> tuple[pd.DataFrame, TruthRecord, CountCube]:
    """Person-quarter records reproducing the market-panel counts exactly.

    Every municipality has ``rlf`` persons with fixed attributes; in each
    quarter persons are shuffled and assigned to states and programs in
    blocks sized by the counts, so aggregation returns the same state and
    program counts. Composition controls exist only on this path.
    """
    cube, truth, _ = gen_market_panel(geo, partition, cfg)
    rng = stream(cfg.seed, "micro")
    n, T = cube.data.shape[:2]
    persons = geo.rlf.astype(np.int64)
    offsets = np.concatenate([[0], np.cumsum(persons)])
    n_people = int(offsets[-1])
    attrs = {}
    probs = {"gender": [0.52, 0.48], "age_band": [0.22, 0.23, 0.28, 0.27], "education": [0.85, 0.15],
             "skill": [0.12, 0.78, 0.10], "industry": [0.3, 0.26, 0.3, 0.14], "nationality": [0.1, 0.9]}
    for a, cats in ATTRIBUTES.items():
        attrs[a] = np.asarray(cats, dtype=object)[rng.choice(len(cats), size=n_people, p=probs[a])]
    width = len(str(n_people))
    pid = np.array([f"p{k + 1:0{width}d}" for k in range(n_people)], dtype=object)
    muni_of = np.repeat(np.arange(n), persons)

    blocks = [("ui_unemployed", "training", "training"), ("ui_unemployed", "short_measure", "short_measure")]
    blocks += [("ui_unemployed", p, p) for p in OTHER_PROGRAMS]
    col = {c: k for k, c in enumerate(cube.columns)}
    state = np.empty((T, n_people), dtype=object)
    program = np.empty((T, n_people), dtype=object)
    for i in range(n):
        lo, hi = offsets[i], offsets[i + 1]
        size = hi - lo
        for t in range(T):
            cnt = cube.data[i, t]
            perm = lo + rng.permutation(size)
            st = np.full(size, "unsub_employed", dtype=object)
            pr = np.full(size, "none", dtype=object)
            pos = 0
            n_ui = cnt[col["ui"]]
            k0 = 0
            for _, p, c in blocks:
                m = cnt[col[c]]
                pr[k0:k0 + m] = p
                k0 += m
            st[:n_ui] = "ui_unemployed"
            pos = n_ui
            m = cnt[col["sub"]]
            st[pos:pos + m] = "sub_employed"
            pr[pos:pos + m] = "wage_subsidy"
            pos += m
            for s, c in (("welfare_unemployed", "welfare"), ("employed_on_benefits", "eob"), ("out", "out")):
                m = cnt[col[c]]
                st[pos:pos + m] = s
                pos += m
            state[t, perm] = st
            program[t, perm] = pr
    micro = pd.DataFrame({
        "person_id": np.tile(pid, T),
        "municipality_id": np.tile(np.asarray(geo.ids, dtype=object)[muni_of], T),
        "quarter": np.repeat(np.arange(cube.start, cube.stop, dtype=np.int64), n_people),
        "state": state.reshape(-1),
        "program": program.reshape(-1),
        **{a: np.tile(v, T) for a, v in attrs.items()},
    })
    return micro, truth, cube


def write_truth(truth: TruthRecord, path) -> None:
    Path(path).write_text(json.dumps(truth.to_json(), indent=2, sort_keys=True) + "\n")


def demo_config(seed: int = 0) -> DGPConfig:
    """Small world of about a million person-quarter records."""
    return DGPConfig(seed=seed, n_municipalities=360, n_cities=18, side_km=130.0, rlf_mean=45.0,
                     rlf_sigma=0.5, rlf_min=15, n_agencies=24, reform_merges=1)

"""ARDL(1, q) and distributed-lag regressions in four-quarter differences.

The model is

    dy_it = theta * dy_i,t-1 + sum_m sum_j phi_j^m * dx^m_i,t-j + gamma' w_i,t-q + mu_t + e_it

estimated by OLS or just-identified 2SLS with ``dz^m_t-j`` instrumenting
``dx^m_t-j``. The lagged outcome, controls and quarter effects are treated as
exogenous.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import NumericalError, ValidationError
from .linalg import lstsq, project
from .panel import PROGRAMS, RegressionDataset
from .quarters import format_quarter

STATIONARITY_MARGIN = 1e-9


@dataclass(frozen=True)
class ModelSpec:
    outcome: str = "unemployment"
    programs: tuple = PROGRAMS
    q: int = 6
    lagged_dependent: bool = True
    estimator: str = "tsls"
    controls: tuple | None = None  # None: every control in the dataset
    fixed_effects: bool = True

    def __post_init__(self):
        if self.q < 0:
            raise ValidationError("q must be non-negative")
        if self.estimator not in ("ols", "tsls"):
            raise ValidationError(f"unknown estimator {self.estimator!r}")
        object.__setattr__(self, "programs", tuple(self.programs))
        if self.controls is not None:
            object.__setattr__(self, "controls", tuple(self.controls))


@dataclass
class Design:
    """Numeric blocks of one regression on the usable rows."""

    y: np.ndarray
    endog: np.ndarray  # policy columns dx
    excluded: np.ndarray | None  # instruments dz
    exog: np.ndarray  # lagged outcome, controls, flags, quarter effects, constant
    endog_names: list
    excluded_names: list
    exog_names: list
    markets: np.ndarray
    quarters: np.ndarray

    @property
    def n(self) -> int:
        return self.y.size


def exog_columns(data: RegressionDataset, spec: ModelSpec) -> list:
    cols = ["dy_lag1"] if spec.lagged_dependent else []
    controls = data.controls if spec.controls is None else tuple(f"w_{c}" if not c.startswith("w_") else c
                                                                 for c in spec.controls)
    missing = [c for c in controls if c not in data.frame.columns]
    if missing:
        raise ValidationError(f"controls not in the dataset: {missing}")
    cols += list(controls)
    cols += [f for f in data.flags if f[:-5] in controls]
    return cols


def build_design(data: RegressionDataset, spec: ModelSpec, rows: pd.DataFrame | None = None) -> Design:
    """Assemble the design.

    Quarter dummies, flags and controls that are zero on every used row (a
    control censored everywhere, say) are left out.
    """
    if spec.q != data.q:
        raise ValidationError(f"dataset was built with q={data.q}, spec asks for q={spec.q}")
    if spec.outcome != data.outcome:
        raise ValidationError(f"dataset outcome {data.outcome!r} differs from spec {spec.outcome!r}")
    frame = data.rows() if rows is None else rows
    endog_names = data.endogenous(spec.programs)
    ex_names = exog_columns(data, spec)
    blocks = [frame[ex_names].to_numpy(dtype=np.float64)] if ex_names else []
    names = list(ex_names)
    keep = [k for k, c in enumerate(names) if c == "dy_lag1" or frame[c].any()]
    if blocks:
        blocks = [blocks[0][:, keep]]
        names = [names[k] for k in keep]
    quarters = frame["quarter"].to_numpy()
    if spec.fixed_effects:
        present = np.unique(quarters)
        fe = (quarters[:, None] == present[None, 1:]).astype(np.float64)
        blocks.append(fe)
        names += [f"fe_{format_quarter(v)}" for v in present[1:]]
    blocks.append(np.ones((len(frame), 1)))
    names.append("const")
    excluded, ex_inst = None, []
    if spec.estimator == "tsls":
        ex_inst = data.instruments(spec.programs)
        missing = [c for c in ex_inst if c not in frame.columns]
        if missing:
            raise ValidationError(f"2SLS needs instruments for every endogenous column; missing {missing}")
        excluded = frame[ex_inst].to_numpy(dtype=np.float64)
    return Design(frame["dy"].to_numpy(dtype=np.float64), frame[endog_names].to_numpy(dtype=np.float64),
                  excluded, np.hstack(blocks), endog_names, ex_inst, names,
                  frame["market"].to_numpy(), quarters)


@dataclass
class FitResult:
    spec: ModelSpec
    coef: dict
    theta: float | None
    phi: np.ndarray  # (M, q+1)
    residuals: np.ndarray
    fitted: np.ndarray
    n_obs: int
    n_markets: int
    cond: float
    covariance: dict | None = None  # filled by the bootstrap

    @property
    def gamma(self) -> dict:
        return {k: v for k, v in self.coef.items() if k.startswith("w_")}

    @property
    def mu(self) -> dict:
        return {k: v for k, v in self.coef.items() if k.startswith("fe_") or k == "const"}

    def short_run(self) -> np.ndarray:
        return self.phi[:, 0].copy()

    def long_run(self) -> np.ndarray:
        return long_run_effect(self.phi.sum(axis=1), self.theta)

    def impulse_response(self, horizon: int = 12, convention: str = "recursion"):
        return impulse_response(self.theta or 0.0, self.phi, horizon, convention)

    def statistics(self, horizon: int = 12, convention: str = "recursion") -> dict:
        """Flat name -> value map used for reporting and the bootstrap."""
        out = {}
        if self.theta is not None:
            out["theta"] = self.theta
        lr = self.long_run()
        _, cum = self.impulse_response(horizon, convention)
        for m, p in enumerate(self.spec.programs):
            for j in range(self.phi.shape[1]):
                out[f"phi:{p}:{j}"] = float(self.phi[m, j])
            out[f"short_run:{p}"] = float(self.phi[m, 0])
            out[f"long_run:{p}"] = float(lr[m])
            for h in range(horizon + 1):
                out[f"cumulative:{p}:{h}"] = float(cum[m, h])
        return out


def _result(spec, design, names, coef, fitted, resid, cond) -> FitResult:
    cmap = dict(zip(names, (float(c) for c in coef)))
    phi = np.array([[cmap[f"dx_{p}_l{j}"] for j in range(spec.q + 1)] for p in spec.programs])
    theta = cmap["dy_lag1"] if spec.lagged_dependent else None
    return FitResult(spec, cmap, theta, phi, resid, fitted, design.n,
                     int(np.unique(design.markets).size), cond)


def _check_rows(design: Design, p: int):
    if design.n < p + 1:
        raise NumericalError(f"{design.n} usable rows for {p} parameters")


def fit_design(design: Design, spec: ModelSpec) -> FitResult:
    names = design.exog_names[:1] + design.endog_names + design.exog_names[1:] \
        if spec.lagged_dependent else design.endog_names + design.exog_names
    if spec.lagged_dependent:
        X = np.hstack([design.exog[:, :1], design.endog, design.exog[:, 1:]])
    else:
        X = np.hstack([design.endog, design.exog])
    _check_rows(design, X.shape[1])
    if spec.estimator == "ols":
        sol = lstsq(X, design.y, names)
        return _result(spec, design, names, sol.coef, sol.fitted, design.y - sol.fitted, sol.cond)
    if design.excluded.shape[1] != design.endog.shape[1]:
        raise ValidationError(
            f"{design.excluded.shape[1]} instruments for {design.endog.shape[1]} endogenous columns")
    Zf = np.hstack([design.excluded, design.exog])
    xhat = project(Zf, design.endog, design.excluded_names + design.exog_names, what="first stage")
    if spec.lagged_dependent:
        Xh = np.hstack([design.exog[:, :1], xhat, design.exog[:, 1:]])
    else:
        Xh = np.hstack([xhat, design.exog])
    sol = lstsq(Xh, design.y, names, what="second stage")
    fitted = X @ sol.coef
    return _result(spec, design, names, sol.coef, fitted, design.y - fitted, sol.cond)


def fit(data: RegressionDataset, spec: ModelSpec) -> FitResult:
    return fit_design(build_design(data, spec), spec)


def fit_ols(data: RegressionDataset, spec: ModelSpec) -> FitResult:
    return fit(data, ModelSpec(**{**asdict(spec), "estimator": "ols"}))


def fit_tsls(data: RegressionDataset, spec: ModelSpec) -> FitResult:
    return fit(data, ModelSpec(**{**asdict(spec), "estimator": "tsls"}))


def fit_dl(data: RegressionDataset, spec: ModelSpec) -> FitResult:
    """Distributed-lag model: the ARDL without the lagged outcome."""
    return fit(data, ModelSpec(**{**asdict(spec), "lagged_dependent": False}))


def long_run_effect(phi_sums, theta) -> np.ndarray:
    """``sum_j phi_j / (1 - theta)``; with ``theta=None`` the plain lag sum."""
    phi_sums = np.asarray(phi_sums, dtype=np.float64)
    if theta is None:
        return phi_sums.copy()
    if not theta < 1.0 - STATIONARITY_MARGIN:
        raise NumericalError(f"non-stationary: theta = {theta} must be below 1")
    return phi_sums / (1.0 - theta)


def impulse_response(theta: float, phi, horizon: int, convention: str = "recursion"):
    """Marginal and cumulative effects per program for ``h = 0..horizon``.

    ``recursion``: ``m_0 = phi_0``, ``m_h = phi_h + theta * m_{h-1}`` up to
    ``q`` and ``theta * m_{h-1}`` beyond; ``C_h`` is the running sum, which
    tends to the long-run effect.

    ``level_shift``: the policy level rises by one unit permanently, so its
    four-quarter difference is 1 for four quarters. ``m_h`` is then the
    response of the four-quarter outcome difference and ``C_h`` the response
    of the outcome level.
    """
    if horizon < 0:
        raise ValidationError("horizon must be non-negative")
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    M, L = phi.shape
    m = np.zeros((M, horizon + 1))
    prev = np.zeros(M)
    for h in range(horizon + 1):
        prev = theta * prev + (phi[:, h] if h < L else 0.0)
        m[:, h] = prev
    if convention == "recursion":
        return m, np.cumsum(m, axis=1)
    if convention == "level_shift":
        g = np.zeros_like(m)
        for k in range(4):
            g[:, k:] += m[:, : horizon + 1 - k]
        level = np.zeros_like(g)
        for h in range(horizon + 1):
            level[:, h] = g[:, h] + (level[:, h - 4] if h >= 4 else 0.0)
        return g, level
    raise ValidationError(f"unknown convention {convention!r}")


def effects_frame(result: FitResult, horizon: int = 12, convention: str = "recursion") -> pd.DataFrame:
    m, c = result.impulse_response(horizon, convention)
    rows = [{"program": p, "horizon": h, "marginal": m[k, h], "cumulative": c[k, h]}
            for k, p in enumerate(result.spec.programs) for h in range(horizon + 1)]
    return pd.DataFrame(rows)


def fit_summary(result: FitResult, data: RegressionDataset | None = None) -> dict:
    spec = asdict(result.spec)
    spec["programs"] = list(spec["programs"])
    if spec["controls"] is not None:
        spec["controls"] = list(spec["controls"])
    out = {
        "spec": spec,
        "coefficients": result.coef,
        "theta": result.theta,
        "short_run": dict(zip(result.spec.programs, result.short_run().tolist())),
        "long_run": dict(zip(result.spec.programs, result.long_run().tolist())),
        "condition_number": result.cond,
        "n_obs": result.n_obs,
        "n_markets": result.n_markets,
    }
    if data is not None:
        out["excluded_markets"] = list(data.excluded_markets)
        out["window"] = [format_quarter(v) for v in data.window]
        out["rows_total"] = int(len(data.frame))
        out["rows_usable"] = int(data.usable.sum())
    return out


def write_fit(directory, result: FitResult, data: RegressionDataset | None = None,
              horizon: int = 12, convention: str = "recursion") -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    (root / "fit.json").write_text(json.dumps(fit_summary(result, data), indent=2, sort_keys=True) + "\n")
    effects_frame(result, horizon, convention).to_csv(root / "effects.csv", index=False,
                                                      float_format="%.17g", lineterminator="\n")


# ------------------------------------------------------- lagged-outcome bias


def lagged_outcome_covariance(T: int, n_units: int = 200, theta: float = 0.5, sigma: float = 1.0,
                              reps: int = 200, seed: int = 0, errors: str = "iid_diff",
                              burn: int = 50) -> tuple[float, float]:
    """Monte Carlo mean and standard error of the within-unit sample covariance
    between ``dy_{t-1}`` and the error ``e_t`` in ``dy_t = a_i + theta dy_{t-1} + e_t``.

    ``errors="iid_diff"`` draws ``e`` iid; demeaning within unit then induces a
    covariance of order ``-1/T`` that vanishes as ``T`` grows.
    ``errors="level_iid"`` uses ``e_t = eps_t - eps_{t-4}`` with iid ``eps``,
    which keeps a covariance near ``-theta**3 sigma**2`` at every ``T``.
    """
    if not abs(theta) < 1:
        raise ValidationError("theta must satisfy |theta| < 1")
    rng = np.random.default_rng(seed)
    total = T + 1 + burn
    means = np.empty(reps)
    for r in range(reps):
        if errors == "iid_diff":
            e = rng.normal(0.0, sigma, size=(n_units, total))
        elif errors == "level_iid":
            eps = rng.normal(0.0, sigma, size=(n_units, total + 4))
            e = eps[:, 4:] - eps[:, :-4]
        else:
            raise ValidationError(f"unknown error model {errors!r}")
        a = rng.normal(0.0, 1.0, size=n_units)
        dy = np.zeros((n_units, total))
        dy[:, 0] = a / (1 - theta)
        for t in range(1, total):
            dy[:, t] = a + theta * dy[:, t - 1] + e[:, t]
        lag = dy[:, burn: burn + T]
        cur = e[:, burn + 1: burn + 1 + T]
        lag = lag - lag.mean(axis=1, keepdims=True)
        cur = cur - cur.mean(axis=1, keepdims=True)
        means[r] = np.mean(np.sum(lag * cur, axis=1) / T)
    return float(means.mean()), float(means.std(ddof=1) / np.sqrt(reps))

import json
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from zoneforge.diagnose import cluster_bootstrap, conditional_f, first_stage, write_diagnostics
from zoneforge.errors import NumericalError, ValidationError
from zoneforge.estimate import Design, ModelSpec

NAMES = ["long_run:training", "short_run:training", "theta"]


def _conventional_f(x, Z, W):
    """F test of the excluded instruments in the first-stage regression."""
    full = np.hstack([Z, W])
    r_full = x - full @ np.linalg.lstsq(full, x, rcond=None)[0]
    r_w = x - W @ np.linalg.lstsq(W, x, rcond=None)[0]
    L = Z.shape[1]
    df2 = len(x) - full.shape[1]
    return ((r_w @ r_w - r_full @ r_full) / L) / (r_full @ r_full / df2)


@pytest.mark.parametrize("L", [1, 3])
def test_single_endogenous_reduces_to_f(L):
    rng = np.random.default_rng(L)
    n = 300
    Z = rng.normal(size=(n, L))
    W = np.hstack([np.ones((n, 1)), rng.normal(size=(n, 2))])
    x = Z @ rng.normal(size=L) * 0.3 + W @ [0.5, 1.0, -1.0] + rng.normal(size=n)
    sw, ap, (df1, df2) = conditional_f(x[:, None], Z, W)
    want = _conventional_f(x, Z, W)
    assert abs(sw[0] - want) < 1e-8 * max(1.0, want)
    assert abs(ap[0] - want) < 1e-8 * max(1.0, want)
    assert (df1, df2) == (L, n - L - 3)


def test_multi_endogenous_weak_column_detected():
    rng = np.random.default_rng(5)
    n = 400
    Z = rng.normal(size=(n, 2))
    W = np.ones((n, 1))
    x1 = Z[:, 0] + 0.1 * rng.normal(size=n)
    x2 = 2 * x1 + 0.01 * rng.normal(size=n)  # no independent variation
    sw, ap, _ = conditional_f(np.column_stack([x1, x2]), Z, W)
    assert sw.min() < 5
    # the numerators coincide, so AP and SW agree up to the denominator
    assert np.all(np.isfinite(ap))


def test_underidentified_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ValidationError):
        conditional_f(rng.normal(size=(50, 3)), rng.normal(size=(50, 1)), np.ones((50, 1)))


def test_first_stage_on_default_world(world_data):
    rep = first_stage(world_data, ModelSpec())
    assert len(rep.columns) == 21
    assert np.all(rep.sw_f > 10)
    assert np.allclose(rep.sw_p, stats.f.sf(rep.sw_f, *rep.df))
    js = rep.to_json()
    assert set(js["columns"]) == set(rep.columns)


def test_bootstrap_deterministic_and_order_free(world_data):
    spec = ModelSpec(estimator="ols")
    a = cluster_bootstrap(world_data, spec, B=20, seed=11, statistics=NAMES, threads=1)
    b = cluster_bootstrap(world_data, spec, B=20, seed=11, statistics=NAMES, threads=1)
    assert np.array_equal(a.draws, b.draws)
    perm = np.random.default_rng(3).permutation(len(world_data.frame))
    shuffled = replace(world_data, frame=world_data.frame.iloc[perm].reset_index(drop=True),
                       usable=world_data.usable[perm])
    c = cluster_bootstrap(shuffled, spec, B=20, seed=11, statistics=NAMES, threads=1)
    assert np.allclose(a.draws, c.draws, rtol=1e-9, atol=1e-12)
    d = cluster_bootstrap(world_data, spec, B=20, seed=12, statistics=NAMES, threads=1)
    assert not np.array_equal(a.draws, d.draws)


def test_bootstrap_threads_match_serial(world_data):
    spec = ModelSpec(estimator="ols")
    a = cluster_bootstrap(world_data, spec, B=12, seed=2, statistics=NAMES, threads=1)
    b = cluster_bootstrap(world_data, spec, B=12, seed=2, statistics=NAMES, threads=3)
    assert np.array_equal(a.draws, b.draws) and np.array_equal(a.replications, b.replications)


def _identical_clusters(n_markets=12, T=30, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(T, 1))
    w = np.column_stack([np.ones(T)])
    y = 0.5 * x[:, 0] + 0.01 * rng.normal(size=T)
    rep = lambda a: np.tile(a, (n_markets, 1)) if a.ndim == 2 else np.tile(a, n_markets)
    return Design(rep(y), rep(x), None, rep(w), ["dx_training_l0"], [], ["const"],
                  np.repeat([f"M{k:03d}" for k in range(n_markets)], T).astype(object),
                  np.tile(np.arange(T), n_markets))


def test_identical_clusters_zero_se():
    spec = ModelSpec(programs=("training",), q=0, lagged_dependent=False, estimator="ols",
                     fixed_effects=False)
    design = _identical_clusters()
    boot = cluster_bootstrap(None, spec, B=50, seed=0, design=design, horizon=2)
    assert np.all(boot.se < 1e-8)
    assert boot.failures == 0


@pytest.mark.parametrize("fail_every, aborts", [(20, False), (13, True)])
def test_failure_share_limit(monkeypatch, fail_every, aborts):
    import zoneforge.diagnose as dg

    spec = ModelSpec(programs=("training",), q=0, lagged_dependent=False, estimator="ols",
                     fixed_effects=False)
    design = _identical_clusters()
    point = dg.fit_design(design, spec)
    calls = {"n": 0}

    def flaky(d, s):
        calls["n"] += 1
        if calls["n"] % fail_every == 0:
            raise NumericalError("boom")
        return point

    monkeypatch.setattr(dg, "fit_design", flaky)
    # 40 replications: every 20th failing is exactly 5%, every 13th is 7.5%
    if aborts:
        with pytest.raises(NumericalError, match="aborted: 3 of 40"):
            cluster_bootstrap(None, spec, B=40, design=design, point=point, threads=1)
    else:
        boot = cluster_bootstrap(None, spec, B=40, design=design, point=point, threads=1)
        assert boot.failures == 2 and boot.replications.tolist() == [r for r in range(40) if r not in (19, 39)]


def test_p_value_and_json(tmp_path, world_data):
    boot = cluster_bootstrap(world_data, ModelSpec(estimator="ols"), B=10, seed=1, statistics=NAMES,
                             threads=1)
    k = boot.names.index("theta")
    assert boot.p_value[k] == pytest.approx(2 * stats.norm.sf(abs(boot.estimate[k]) / boot.se[k]))
    write_diagnostics(tmp_path, boot=boot)
    js = json.loads((tmp_path / "bootstrap.json").read_text())
    assert js["B"] == 10 and set(js["statistics"]) == set(NAMES)
    reps = pd.read_csv(tmp_path / "replications.csv")
    assert list(reps.columns) == ["replication"] + NAMES


def test_bootstrap_validation(world_data):
    with pytest.raises(ValidationError):
        cluster_bootstrap(world_data, ModelSpec(estimator="ols"), B=1)
    with pytest.raises(ValidationError, match="unknown statistics"):
        cluster_bootstrap(world_data, ModelSpec(estimator="ols"), B=5, statistics=["nope"])

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zoneforge.errors import NumericalError, RankDeficiencyError, ValidationError
from zoneforge.estimate import (ModelSpec, build_design, effects_frame, fit, fit_design, fit_dl,
                                impulse_response, lagged_outcome_covariance, long_run_effect)
from zoneforge.linalg import lstsq
from zoneforge.simgen import DGPConfig, truth_record


def _X(design, spec):
    if spec.lagged_dependent:
        return np.hstack([design.exog[:, :1], design.endog, design.exog[:, 1:]])
    return np.hstack([design.endog, design.exog])


def test_ols_matches_numpy(world_data):
    spec = ModelSpec(estimator="ols")
    design = build_design(world_data, spec)
    res = fit_design(design, spec)
    X = _X(design, spec)
    want = np.linalg.lstsq(X, design.y, rcond=None)[0]
    assert list(res.coef.values()) == pytest.approx(want.tolist(), rel=1e-8, abs=1e-10)
    assert np.allclose(res.residuals, design.y - X @ want, atol=1e-12)


def test_tsls_matches_textbook(world_data):
    spec = ModelSpec(estimator="tsls")
    design = build_design(world_data, spec)
    res = fit_design(design, spec)
    X = _X(design, spec)
    Z = np.hstack([design.exog[:, :1], design.excluded, design.exog[:, 1:]])
    # just identified: b = (Z'X)^-1 Z'y
    want = np.linalg.solve(Z.T @ X, Z.T @ design.y)
    got = np.array(list(res.coef.values()))
    assert np.allclose(got, want, rtol=1e-7, atol=1e-9)
    assert res.n_markets == len(set(design.markets))


def test_design_layout(world_data):
    design = build_design(world_data, ModelSpec())
    assert design.endog.shape[1] == 21 and design.excluded.shape[1] == 21
    assert design.exog_names[0] == "dy_lag1" and design.exog_names[-1] == "const"
    assert design.endog_names[:2] == ["dx_training_l0", "dx_training_l1"]
    assert all(n.startswith("dz_") for n in design.excluded_names)


def test_spec_validation(world_data):
    with pytest.raises(ValidationError):
        ModelSpec(estimator="gmm")
    with pytest.raises(ValidationError):
        ModelSpec(q=-1)
    with pytest.raises(ValidationError, match="q=6"):
        build_design(world_data, ModelSpec(q=3))
    with pytest.raises(ValidationError, match="controls"):
        build_design(world_data, ModelSpec(controls=("nope",)))


def test_rank_deficiency_names_columns():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 3))
    X = np.hstack([X, X[:, :1] + 2 * X[:, 1:2]])
    with pytest.raises(RankDeficiencyError) as info:
        lstsq(X, rng.normal(size=50), ["a", "b", "c", "d"])
    msg = str(info.value)
    assert "rank 3 < 4" in msg
    (col, partners), = info.value.collinear
    assert set([col] + partners) == {"a", "b", "d"}


def test_too_few_rows():
    with pytest.raises(RankDeficiencyError):
        lstsq(np.ones((2, 3)), np.ones(2))


def test_long_run_anchor():
    assert long_run_effect([0.089775], 0.685)[0] == pytest.approx(0.285, abs=1e-12)
    assert long_run_effect([0.2], None)[0] == 0.2
    with pytest.raises(NumericalError, match="non-stationary"):
        long_run_effect([0.1], 1.0)


def _step_response(theta, phi, H):
    """Simulate dy for a one-off unit pulse in dx at t=0."""
    L = len(phi)
    dx = np.zeros(H + 1)
    dx[0] = 1.0
    dy = np.zeros(H + 1)
    for t in range(H + 1):
        dy[t] = (theta * dy[t - 1] if t else 0.0) + sum(phi[j] * dx[t - j] for j in range(min(L, t + 1)))
    return dy


@settings(max_examples=60, deadline=None)
@given(st.floats(-0.95, 0.95), st.lists(st.floats(-1, 1), min_size=1, max_size=8))
def test_impulse_matches_simulation(theta, phi):
    m, c = impulse_response(theta, [phi], 60)
    sim = _step_response(theta, phi, 60)
    assert np.allclose(m[0], sim, atol=1e-12)
    assert np.allclose(c[0], np.cumsum(sim), atol=1e-12)


def test_cumulative_tends_to_long_run():
    phi = np.array([[0.02, 0.01, 0.0, -0.01, -0.02, -0.02, -0.02]])
    _, c = impulse_response(0.6, phi, 400)
    assert c[0, -1] == pytest.approx(long_run_effect(phi.sum(axis=1), 0.6)[0], abs=1e-14)
    assert truth_record(DGPConfig()).long_run["training"] == pytest.approx(-0.1)


def test_level_shift_convention():
    # a permanent level step: the outcome level settles at the long-run effect
    theta, phi = 0.5, np.array([[0.3, 0.1]])
    g, level = impulse_response(theta, phi, 200, "level_shift")
    assert level[0, -1] == pytest.approx(0.4 / 0.5, abs=1e-12)
    # four-quarter difference of the level response
    assert np.allclose(g[0, 4:], level[0, 4:] - level[0, :-4], atol=1e-14)
    with pytest.raises(ValidationError):
        impulse_response(theta, phi, 5, "other")


def test_statistics_and_effects(world_data):
    res = fit(world_data, ModelSpec(estimator="ols"))
    stats = res.statistics(horizon=4)
    assert stats["theta"] == res.theta
    assert stats["short_run:training"] == stats["phi:training:0"]
    assert stats["cumulative:training:0"] == stats["phi:training:0"]
    frame = effects_frame(res, horizon=4)
    assert len(frame) == 3 * 5 and list(frame.columns) == ["program", "horizon", "marginal", "cumulative"]


def test_distributed_lag_has_no_theta(world_data):
    res = fit_dl(world_data, ModelSpec(estimator="ols"))
    assert res.theta is None and "dy_lag1" not in res.coef
    assert np.allclose(res.long_run(), res.phi.sum(axis=1))


def test_bias_covariance_shrinks():
    covs = [lagged_outcome_covariance(T, reps=60, seed=3)[0] for T in (8, 32)]
    assert covs[0] < 0 and abs(covs[1]) < abs(covs[0])
    with pytest.raises(ValidationError):
        lagged_outcome_covariance(8, theta=1.0)

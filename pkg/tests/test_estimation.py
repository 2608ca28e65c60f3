import numpy as np
import pytest
from scipy import stats

from pthmm.estimation import (FitOptions, PenalizedMode, fit, fit_null, fit_penalized, fit_restricted,
                              marginal_loglik, mode_hessian, multi_start, negative_hessian,
                              progressive_sharpness_fit, qreml_loop, qreml_update)
from pthmm.exceptions import ConvergenceError, DomainError
from pthmm.likelihood import Track, TrackData, forward_loglik, layout_for, objective_gradient
from pthmm.model import Beta0, ModelSpec, StandardizedCovariate, _softmax_rows
from pthmm.simulation import CanonicalParams, ScenarioConfig, scenario_dataset, scenario_spec, simulate_thmm

FAST = FitOptions(n_starts=1)


@pytest.fixture(scope="module")
def null_5000():
    th = CanonicalParams().theta()
    tr, _, _ = simulate_thmm(th, [0.0], np.zeros((5000, 1)), 11)
    spec = ModelSpec(3)
    data = TrackData([tr], [StandardizedCovariate(None, 0.0, 1.0)])
    return data, spec, fit_null(data, spec, FitOptions(n_starts=2))


@pytest.fixture(scope="module")
def scen_1a():
    sc = ScenarioConfig("1a", 3000, 1, seed=5)
    data, beta, _ = scenario_dataset(sc, 0)
    spec = scenario_spec(sc)
    nf = fit_null(data, spec, FAST)
    return data, spec, beta, nf


def test_options_validation():
    with pytest.raises(DomainError):
        FitOptions(sharpness_schedule=(5.0, 5.0))
    with pytest.raises(DomainError):
        FitOptions(epsilon_sep=1.5)
    with pytest.raises(DomainError):
        FitOptions(n_starts=0)
    assert FitOptions(target_b=100.0).b_target(ModelSpec(2)) == 100.0
    assert FitOptions().b_target(ModelSpec(2, sharpness_target=800.0)) == 800.0


def test_null_fit_stationary(null_5000):
    data, spec, nf = null_5000
    lay = layout_for(nf.theta, None, data, spec)
    g = objective_gradient(nf.theta, None, data, 0.0, layout=lay)
    assert np.linalg.norm(g[lay.slices["state"]]) < 1e-3


def test_null_fit_recovers_means(null_5000):
    data, spec, nf = null_5000
    p = CanonicalParams()
    est = nf.theta.state_params["step"]
    # rough standard error of a state mean from its share of the sample
    for i, (m, s) in enumerate(zip(p.means, p.shapes)):
        se = m / np.sqrt(s) / np.sqrt(data.T / 3)
        assert abs(est[i, 0] - m) < 3 * se + 0.02
    assert np.all(np.diff(est[:, 0]) < 0)


def test_single_state_is_plain_mle(rng):
    x = rng.gamma(3.0, 2.0, 4000)
    data = TrackData([Track({"step": x}, threshold_covariates=np.zeros((x.size, 1)))])
    nf = fit_null(data, ModelSpec(1), FAST)
    shape, _, scale = stats.gamma.fit(x, floc=0)
    m, s = nf.theta.state_params["step"][0]
    assert s == pytest.approx(shape, rel=1e-4)
    assert m == pytest.approx(shape * scale, rel=1e-4)


def test_label_permutation_equal_likelihood(null_5000):
    data, spec, nf = null_5000
    a = forward_loglik(nf.theta, None, data)
    b = forward_loglik(nf.theta.permuted([2, 0, 1]), None, data)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-8)


def test_multi_start_contracts():
    def proc(i, rng):
        v = rng.normal()
        return v, (i, v), True, ""

    one, rec = multi_start(proc, 1, seed=3)
    assert len(rec) == 1 and one[0] == 0
    a, _ = multi_start(proc, 5, seed=9)
    b, _ = multi_start(proc, 5, seed=9)
    assert a == b
    c, _ = multi_start(proc, 50, seed=9)
    assert c[1] >= a[1]
    with pytest.raises(DomainError):
        multi_start(proc, 0)

    def bad(i, rng):
        raise np.linalg.LinAlgError("singular")

    with pytest.raises(ConvergenceError):
        multi_start(bad, 3)


def test_progressive_recovers_threshold(scen_1a):
    data, spec, beta, nf = scen_1a
    prog = progressive_sharpness_fit(data, spec, nf, FAST)
    assert abs(prog.beta0.values[0] - beta[0]) < 0.2
    ll = np.array(prog.stage_loglik)
    assert np.all(np.diff(ll) >= -1e-6 * np.abs(ll[:-1]))


def test_progressive_single_stage_equals_sharp_fit(scen_1a):
    data, spec, _, nf = scen_1a
    opt = FitOptions(n_starts=1, sharpness_schedule=(500.0,))
    a = progressive_sharpness_fit(data, spec, nf, opt)
    b = progressive_sharpness_fit(data, spec, nf, FAST, schedule=(500.0,))
    assert np.array_equal(a.beta0.log_values, b.beta0.log_values)
    assert len(a.stage_loglik) == 1


def test_huge_lambda_collapses_threshold():
    sc = ScenarioConfig("1b", 2000, 1, seed=2)
    data, _, _ = scenario_dataset(sc, 0)
    spec = scenario_spec(sc)
    nf = fit_null(data, spec, FAST)
    prog = progressive_sharpness_fit(data, spec, nf, FAST)
    mode = fit_penalized(data, spec, 1e6, (prog.theta, prog.beta0), FAST)
    assert np.all(mode.beta0.values < 1.0)


def test_zero_lambda_is_unpenalized_fit(scen_1a):
    data, spec, _, nf = scen_1a
    mode, _ = fit_restricted(data, spec, FAST, nf)
    again = fit_penalized(data, spec, 0.0, (mode.theta, mode.beta0), FAST)
    assert again.loglik == pytest.approx(mode.loglik, abs=1e-4)
    assert again.penalized == pytest.approx(mode.penalized, abs=1e-4)


def test_negative_hessian_quadratic(rng):
    M = rng.normal(size=(6, 6))
    A = M @ M.T + 6 * np.eye(6)
    res = negative_hessian(lambda x: -A @ x, rng.normal(size=6))
    assert np.allclose(res.matrix, A, atol=1e-6)
    assert res.jitter == 0.0
    assert res.logdet == pytest.approx(np.linalg.slogdet(A)[1], abs=1e-8)


def test_negative_hessian_jitter_path():
    A = np.diag([1.0, 0.0, 2.0])
    res = negative_hessian(lambda x: -A @ x, np.zeros(3), jitter=(1e-8, 1e-4))
    assert res.jitter == 1e-8
    assert np.isfinite(res.logdet)
    with pytest.raises(np.linalg.LinAlgError):
        negative_hessian(lambda x: A @ x, np.zeros(3), jitter=(1e-8,))


def test_hessian_independent_of_lambda(scen_1a):
    data, spec, _, nf = scen_1a
    prog = progressive_sharpness_fit(data, spec, nf, FAST)
    mode = PenalizedMode(prog.theta, prog.beta0, 1.0, 0.0, 0.0, 0.0, 0.0, True)
    h1 = mode_hessian(data, spec, mode, FAST, lam=1.0)
    h2 = mode_hessian(data, spec, mode, FAST, lam=2.0)
    assert np.max(np.abs(h1.matrix - h2.matrix)) <= 1e-8


def test_marginal_loglik_arithmetic():
    assert marginal_loglik(-100.0, [0.5], 1.0, 0.0, 1) == pytest.approx(-100.5)


def test_marginal_lambda_derivative():
    beta, lam, p2 = np.array([0.4, 1.1]), 1.7, 2

    def f(l):
        return marginal_loglik(-50.0, beta, l, 3.0, p2)

    h = 1e-6
    fd = (f(lam + h) - f(lam - h)) / (2 * h)
    assert fd == pytest.approx(p2 / lam - beta.sum(), abs=1e-6)


def test_qreml_update():
    assert qreml_update([0.5]) == (2.0, False)
    assert qreml_update([0.5, 1.5]) == (1.0, False)
    assert qreml_update([0.0, 0.0]) == (1e8, True)
    assert qreml_update(Beta0([-40.0])) == (1e8, True)


def test_qreml_fit_on_scenario(scen_1a):
    data, spec, beta, nf = scen_1a
    res = qreml_loop(data, spec, FAST, null_fit=nf)
    assert res.converged and not res.capped
    assert res.lambda_hat * res.beta0_hat.values.sum() == pytest.approx(spec.p2, abs=10 * FAST.qreml_tol)
    assert res.disturbance_detected == [True]
    assert res.lambda_history[-1] == res.lambda_hat
    sc = data.scaling[0]
    assert res.thresholds_original[0] == pytest.approx(sc.to_original(1 / res.beta0_hat.values[0]))
    assert abs(res.thresholds_original[0] - 21.0) < 2.0
    # separation holds whenever a disturbance is reported
    xb = data.stacked().design.mean(axis=0)
    GB = _softmax_rows(np.tensordot(xb, res.theta_hat.coeffs.B, axes=(0, 0)) * (1 - np.eye(3)))
    GD = _softmax_rows(np.tensordot(xb, res.theta_hat.coeffs.D, axes=(0, 0)) * (1 - np.eye(3)))
    assert np.max(np.abs(np.diag(GB) - np.diag(GD))) >= FAST.epsilon_sep - 1e-6
    assert res.nu_series.shape == (data.T,)


def test_capped_null_reports_no_threshold():
    # covariate constant at zero except one step: there is nothing to split on
    th = CanonicalParams().theta()
    u = np.zeros((1500, 1))
    u[0] = 1.0
    tr, _, _ = simulate_thmm(th, [0.0], u, 4)
    data = TrackData([tr], [StandardizedCovariate(u[:, 0], 0.0, 1.0)])
    res = fit(data, ModelSpec(3), FAST)
    for thr, sc in zip(res.thresholds_original, data.scaling):
        if res.capped:
            assert thr is None or not (sc.orig_min <= thr <= sc.orig_max)


def test_spec_data_mismatch(scen_1a):
    data, _, _, nf = scen_1a
    with pytest.raises(DomainError):
        qreml_loop(data, ModelSpec(3, threshold_covariates=("a", "b")), FAST, null_fit=nf)

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import gamma as gamma_dist, vonmises

from conftest import brute_force, random_data, random_theta
from pthmm.exceptions import DomainError, InputError
from pthmm.likelihood import (Track, TrackData, forward_loglik, layout_for, nu_series, objective_gradient,
                              penalized_loglik, state_occupancy, viterbi)
from pthmm.model import Beta0, RegimeCoefficients, ThetaParams, persistence_to_coeffs


def reference_forward(delta, G, dens):
    """Plain scaled forward recursion for a one-regime HMM, constant TPM."""
    alpha = delta * dens[0]
    ll = np.log(alpha.sum())
    alpha = alpha / alpha.sum()
    for t in range(1, len(dens)):
        alpha = (alpha @ G) * dens[t]
        s = alpha.sum()
        ll += np.log(s)
        alpha = alpha / s
    return ll


def _dens(theta, obs):
    n = theta.n_states
    out = np.ones((len(obs["step"]), n))
    for i in range(n):
        m, s = theta.state_params["step"][i]
        out[:, i] *= gamma_dist.pdf(obs["step"], s, scale=m / s)
        if "angle" in obs:
            loc, k = theta.state_params["angle"][i]
            out[:, i] *= vonmises.pdf(obs["angle"], k, loc=loc)
    return out


def test_single_observation(rng):
    th = random_theta(rng, 2)
    data = TrackData([Track({"step": [3.0]}, threshold_covariates=[[0.0]])])
    d = _dens(th, {"step": np.array([3.0])})[0]
    assert forward_loglik(th, Beta0.from_values([0.5]), data) == pytest.approx(np.log(th.delta_B @ d), rel=1e-12)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_zero_mixture_matches_plain_hmm(rng, n):
    th = random_theta(rng, n, angle=True)
    data = random_data(rng, 400, th)
    tr = data.tracks[0]
    from pthmm.model import build_tpm
    ref = reference_forward(th.delta_B, build_tpm(th.coeffs.B), _dens(th, tr.observations))
    # beta small enough that beta * u never exceeds 1
    got = forward_loglik(th, Beta0.from_values([0.01]), data)
    assert got == pytest.approx(ref, rel=1e-10)
    assert forward_loglik(th, None, data) == pytest.approx(ref, rel=1e-10)


def test_unit_mixture_matches_disturbed_hmm(rng):
    th = random_theta(rng, 3)
    data = random_data(rng, 300, th)
    tr = data.tracks[0]
    tr.threshold_covariates[:] = 1.0
    data = TrackData([tr])
    from pthmm.model import build_tpm
    ref = reference_forward(th.delta_D, build_tpm(th.coeffs.D), _dens(th, tr.observations))
    assert forward_loglik(th, Beta0.from_values([3.0]), data) == pytest.approx(ref, rel=1e-10)


@pytest.mark.parametrize("seed", range(12))
def test_brute_force_enumeration(seed):
    r = np.random.default_rng(seed)
    n = 2 if seed % 2 else 3
    T = 5 if n == 2 else 4
    th = random_theta(r, n, n_cov=seed % 3 == 0, angle=seed % 4 == 1)
    data = random_data(r, 2 * T, th, p2=2, n_tracks=2, mask_frac=0.3)
    # push some steps across the threshold and leave a gap
    for tr in data.tracks:
        tr.threshold_covariates[:] = r.uniform(0, 1.5, tr.threshold_covariates.shape)
        tr.observations["step"][1] = np.nan
    beta = Beta0.from_values(r.uniform(0.3, 1.5, 2))
    ll, paths = brute_force(th, beta, data, b=5.0)
    assert forward_loglik(th, beta, data, b=5.0) == pytest.approx(ll, rel=1e-10)
    got = viterbi(th, beta, data, b=5.0)
    for a, p in zip(got, paths):
        assert np.array_equal(a, p)


def test_missing_observation_is_neutral(rng):
    th = random_theta(rng, 2)
    full = random_data(rng, 6, th)
    tr = full.tracks[0]
    obs = dict(tr.observations)
    obs["step"] = obs["step"].copy()
    obs["step"][2] = np.nan
    gap = TrackData([Track(obs, None, tr.threshold_covariates, tr.baseline_mask)])
    beta = Beta0.from_values([0.5])
    ll, _ = brute_force(th, beta, gap)
    assert forward_loglik(th, beta, gap) == pytest.approx(ll, rel=1e-10)


def test_penalized_loglik_arithmetic(rng):
    th = random_theta(rng, 2)
    data = random_data(rng, 50, th, p2=2)
    beta = Beta0.from_values([0.5, 1.5])
    ll = forward_loglik(th, beta, data)
    assert penalized_loglik(th, beta, data, 0.0) == ll
    assert penalized_loglik(th, beta, data, 2.0) == pytest.approx(ll - 4.0, abs=1e-12)
    with pytest.raises(DomainError):
        penalized_loglik(th, beta, data, -1.0)


@given(l1=st.floats(0, 100), l2=st.floats(0, 100))
def test_penalized_loglik_monotone_in_lambda(l1, l2):
    r = np.random.default_rng(3)
    th = random_theta(r, 2)
    data = random_data(r, 40, th)
    beta = Beta0.from_values([0.8])
    lo, hi = sorted((l1, l2))
    assert penalized_loglik(th, beta, data, hi) <= penalized_loglik(th, beta, data, lo)


def central_diff(f, w, h=1e-5):
    g = np.empty_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g


@pytest.mark.parametrize("n,T", [(2, 100), (2, 500), (3, 100), (3, 500)])
@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_central_differences(n, T, seed):
    r = np.random.default_rng(1000 * n + T + seed)
    th = random_theta(r, n, n_cov=1, angle=True)
    data = random_data(r, T, th, p2=2, n_tracks=2, mask_frac=0.1)
    beta = Beta0.from_values(r.uniform(0.5, 2.0, 2))
    lam, b = r.uniform(0, 3), 20.0
    lay = layout_for(th, beta, data)
    w0 = lay.pack(th, beta)

    def f(w):
        t2, b2 = lay.unpack(w, th)
        return penalized_loglik(t2, b2, data, lam, b)

    fd = central_diff(f, w0)
    an = objective_gradient(th, beta, data, lam, b, lay)
    assert np.all(np.abs(an - fd) <= np.maximum(1e-4, 1e-3 * np.abs(fd)))
    fd2 = objective_gradient(th, beta, data, lam, b, lay, method="fd")
    assert np.all(np.abs(fd2 - fd) <= np.maximum(1e-4, 1e-3 * np.abs(fd)))


def test_penalty_gradient_closed_form(rng):
    th = random_theta(rng, 2)
    data = random_data(rng, 100, th, p2=2)
    beta = Beta0.from_values([0.7, 1.3])
    lay = layout_for(th, beta, data)
    g0 = objective_gradient(th, beta, data, 0.0, 50.0, lay)
    g1 = objective_gradient(th, beta, data, 2.5, 50.0, lay)
    assert np.allclose((g1 - g0)[lay.slices["log_beta"]], -2.5 * beta.values, atol=1e-12)


def test_null_gradient_shape(rng):
    th = random_theta(rng, 3)
    data = random_data(rng, 80, th)
    lay = layout_for(th, None, data)
    g = objective_gradient(th, None, data, 0.0, layout=lay)
    assert g.shape == (lay.size,)
    assert "log_beta" not in lay.slices
    with pytest.raises(ValueError):
        objective_gradient(th, None, data, 0.0, layout=lay, method="bogus")


def test_permutation_invariance(rng):
    th = random_theta(rng, 3, n_cov=1, angle=True)
    data = random_data(rng, 200, th, p2=1)
    beta = Beta0.from_values([1.4])
    base = forward_loglik(th, beta, data, 50.0)
    for perm in ([1, 0, 2], [2, 0, 1], [1, 2, 0]):
        assert forward_loglik(th.permuted(perm), beta, data, 50.0) == pytest.approx(base, rel=1e-11)


def test_long_series_finite(rng):
    th = random_theta(rng, 3)
    data = random_data(rng, 100_000, th)
    assert np.isfinite(forward_loglik(th, Beta0.from_values([1.3]), data))


def test_nu_series_respects_mask(rng):
    th = random_theta(rng, 2)
    data = random_data(rng, 200, th, mask_frac=0.5)
    nu = nu_series(Beta0.from_values([50.0]), data, 500.0)
    mask = data.tracks[0].baseline_mask
    assert np.all(nu[mask] == 0.0)
    from scipy.special import expit
    u = data.tracks[0].threshold_covariates[:, 0]
    assert np.allclose(nu[~mask], expit(500.0 * (50.0 * u[~mask] - 1.0)))


def test_viterbi_recovers_separated_states():
    from pthmm.simulation import simulate_thmm
    B = persistence_to_coeffs([0.9, 0.9])
    th = ThetaParams({"step": np.array([[20.0, 50.0], [1.0, 50.0]])}, RegimeCoefficients(B, B),
                     np.array([0.5, 0.5]), np.array([0.5, 0.5]), {"step": "gamma"})
    tr, states, _ = simulate_thmm(th, [0.0], np.zeros((1000, 1)), 7)
    path = viterbi(th, Beta0.from_values([1e-3]), TrackData([tr]))[0]
    assert np.mean(path == states) >= 0.99


def test_viterbi_tie_goes_to_lower_index():
    B = np.zeros((1, 2, 2))
    th = ThetaParams({"step": np.array([[2.0, 3.0], [2.0, 3.0]])}, RegimeCoefficients(B, B),
                     np.array([0.5, 0.5]), np.array([0.5, 0.5]), {"step": "gamma"})
    data = TrackData([Track({"step": [1.0, 2.0, 3.0, 2.0]}, threshold_covariates=np.zeros((4, 1)))])
    assert list(viterbi(th, Beta0.from_values([0.1]), data)[0]) == [0, 0, 0, 0]


def test_occupancy():
    assert list(state_occupancy([np.zeros(5, int)], 3)) == [1.0, 0.0, 0.0]
    a, b = np.array([0, 1, 1, 2]), np.array([2, 2, 0, 1, 1, 1])
    whole = state_occupancy([a, b], 3)
    weighted = (4 * state_occupancy([a], 3) + 6 * state_occupancy([b], 3)) / 10
    assert np.allclose(whole, weighted)
    with pytest.raises(InputError):
        state_occupancy([])


def test_track_validation():
    with pytest.raises(InputError):
        Track({"step": [1.0, 2.0], "angle": [0.1]})
    with pytest.raises(InputError):
        Track({"step": [1.0, 2.0]}, baseline_mask=[True])
    with pytest.raises(InputError):
        Track({"step": [1.0, 2.0]}, threshold_covariates=[[np.inf], [0.0]])
    with pytest.raises(InputError):
        TrackData([])

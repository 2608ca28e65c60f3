import itertools

import numpy as np
import pytest
from hypothesis import settings

from pthmm.likelihood import Track, TrackData
from pthmm.model import Beta0, RegimeCoefficients, StandardizedCovariate, ThetaParams

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def random_theta(rng, n, n_cov=0, angle=False):
    means = np.sort(rng.uniform(0.5, 10.0, n))[::-1]
    sp = {"step": np.column_stack([means, rng.uniform(1.5, 12.0, n)])}
    fam = {"step": "gamma"}
    if angle:
        sp["angle"] = np.column_stack([rng.uniform(-1, 1, n), rng.uniform(0.2, 5.0, n)])
        fam["angle"] = "vonmises"
    B = rng.normal(-1.5, 0.7, (1 + n_cov, n, n))
    D = rng.normal(-0.5, 0.7, (1 + n_cov, n, n))
    if n_cov:
        B[1:] = rng.normal(0, 0.3, B[1:].shape)
        D[1:] = rng.normal(0, 0.3, D[1:].shape)
    dB = rng.dirichlet(np.ones(n))
    dD = rng.dirichlet(np.ones(n))
    return ThetaParams(sp, RegimeCoefficients(B, D), dB, dD, fam)


def random_data(rng, T, theta, p2=1, n_tracks=1, mask_frac=0.0):
    n_cov = theta.coeffs.B.shape[0] - 1
    tracks = []
    sizes = np.full(n_tracks, T // n_tracks)
    sizes[-1] += T - sizes.sum()
    for k, L in enumerate(sizes):
        obs = {"step": rng.gamma(2.0, 2.0, L)}
        if "angle" in theta.state_params:
            obs["angle"] = rng.uniform(-np.pi, np.pi, L)
        u = rng.uniform(0, 1, (L, p2))
        cov = rng.normal(0, 1, (L, n_cov)) if n_cov else None
        mask = rng.random(L) < mask_frac
        tracks.append(Track(obs, cov, u, mask, f"tr{k}"))
    scaling = [StandardizedCovariate(None, 0.0, 1.0) for _ in range(p2)]
    return TrackData(tracks, scaling)


def brute_force(theta, beta0, data, b=500.0):
    """Exhaustive sum and argmax over all state paths of every track."""
    from scipy.special import expit
    from scipy.stats import gamma as gamma_dist, vonmises

    n = theta.n_states
    total_ll, paths = 0.0, []
    for tr in data.tracks:
        T = len(tr)
        if beta0 is None:
            nu = np.zeros(T)
        else:
            nu = np.where(tr.baseline_mask, 0.0, expit(b * (tr.threshold_covariates @ beta0.values - 1.0)))
        dens = np.ones((T, n))
        for name, p in theta.state_params.items():
            x = tr.observations[name]
            for i in range(n):
                if theta.families[name] == "gamma":
                    f = gamma_dist.pdf(x, p[i, 1], scale=p[i, 0] / p[i, 1])
                else:
                    f = vonmises.pdf(x, p[i, 1], loc=p[i, 0])
                dens[:, i] *= np.where(np.isnan(x), 1.0, f)

        def tpm(coef, t):
            x = np.concatenate([[1.0], tr.tpm_covariates[t]])
            eta = np.einsum("c,cij->ij", x, coef)
            np.fill_diagonal(eta, 0.0)
            e = np.exp(eta)
            return e / e.sum(axis=1, keepdims=True)

        D = theta.coeffs.D if beta0 is not None else theta.coeffs.B
        dD = theta.delta_D if beta0 is not None else theta.delta_B
        G = [(1 - nu[t]) * tpm(theta.coeffs.B, t) + nu[t] * tpm(D, t) for t in range(T)]
        init = (1 - nu[0]) * theta.delta_B + nu[0] * dD
        lik, best, best_p = 0.0, -1.0, None
        for path in itertools.product(range(n), repeat=T):
            p = init[path[0]] * dens[0, path[0]]
            for t in range(1, T):
                p *= G[t][path[t - 1], path[t]] * dens[t, path[t]]
            lik += p
            if p > best * (1 + 1e-12):
                best, best_p = p, path
        total_ll += np.log(lik)
        paths.append(np.array(best_p))
    return total_ll, paths


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def record_acceptance(criterion, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

"""Forward likelihood of the two-regime THMM, its gradient and Viterbi decoding."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, psi

from . import _kernels
from .distributions import _gamma_logpdf, _vonmises_logpdf, bessel_ratio, wrap_angle
from .exceptions import DomainError, InputError
from .model import Beta0, ModelSpec, ParamLayout, StandardizedCovariate, ThetaParams, tpm_series


@dataclass
class Track:
    """One contiguous series.

    ``observations`` maps stream name to a length-T vector (NaN = missing);
    ``tpm_covariates`` is (T, C); ``threshold_covariates`` is (T, p2) on the
    standardized scale; ``baseline_mask`` forces the baseline regime.
    """

    observations: dict
    tpm_covariates: np.ndarray = None
    threshold_covariates: np.ndarray = None
    baseline_mask: np.ndarray = None
    track_id: str = "0"

    def __post_init__(self):
        self.observations = {k: np.asarray(v, dtype=float) for k, v in self.observations.items()}
        lengths = {v.size for v in self.observations.values()}
        if len(lengths) != 1:
            raise InputError(f"track {self.track_id}: observation streams differ in length")
        T = lengths.pop()
        if T < 1:
            raise InputError(f"track {self.track_id} is empty")
        if self.tpm_covariates is None:
            self.tpm_covariates = np.zeros((T, 0))
        self.tpm_covariates = np.asarray(self.tpm_covariates, dtype=float).reshape(T, -1)
        if self.threshold_covariates is None:
            self.threshold_covariates = np.zeros((T, 0))
        self.threshold_covariates = np.asarray(self.threshold_covariates, dtype=float).reshape(T, -1)
        if self.baseline_mask is None:
            self.baseline_mask = np.zeros(T, dtype=bool)
        self.baseline_mask = np.asarray(self.baseline_mask, dtype=bool)
        if self.baseline_mask.size != T:
            raise InputError(f"track {self.track_id}: baseline mask length mismatch")
        if not (np.all(np.isfinite(self.tpm_covariates)) and np.all(np.isfinite(self.threshold_covariates))):
            raise InputError(f"track {self.track_id}: non-finite covariates")

    def __len__(self):
        return self.baseline_mask.size


@dataclass
class TrackData:
    tracks: list
    scaling: list = field(default_factory=list)  # StandardizedCovariate per threshold slot

    def __post_init__(self):
        if not self.tracks:
            raise InputError("no tracks")
        self._stacked = None

    @property
    def T(self) -> int:
        return sum(len(t) for t in self.tracks)

    @property
    def p2(self) -> int:
        return self.tracks[0].threshold_covariates.shape[1]

    def stacked(self) -> "Stacked":
        if self._stacked is None:
            self._stacked = Stacked.from_tracks(self.tracks)
        return self._stacked

    def select_slots(self, keep) -> "TrackData":
        keep = list(keep)
        tracks = [Track(t.observations, t.tpm_covariates, t.threshold_covariates[:, keep],
                        t.baseline_mask, t.track_id) for t in self.tracks]
        scaling = [self.scaling[i] for i in keep] if self.scaling else []
        return TrackData(tracks, scaling)


@dataclass
class Stacked:
    obs: dict
    design: np.ndarray
    u: np.ndarray
    mask: np.ndarray
    starts: np.ndarray
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_tracks(cls, tracks):
        names = list(tracks[0].observations)
        obs = {k: np.concatenate([t.observations[k] for t in tracks]) for k in names}
        cov = np.concatenate([t.tpm_covariates for t in tracks])
        design = np.column_stack([np.ones(cov.shape[0]), cov])
        u = np.concatenate([t.threshold_covariates for t in tracks])
        mask = np.concatenate([t.baseline_mask for t in tracks])
        starts = np.concatenate([[0], np.cumsum([len(t) for t in tracks])]).astype(np.int64)
        return cls(obs, design, u, mask, starts)


def _emissions(theta: ThetaParams, st: Stacked, want_grad=False):
    # state parameters are often held fixed across many evaluations
    key = (want_grad, tuple((k, theta.families[k], v.tobytes()) for k, v in sorted(theta.state_params.items())))
    hit = st.cache.get("emissions")
    if hit is not None and hit[0] == key:
        return hit[1]
    out = _emissions_uncached(theta, st, want_grad)
    st.cache["emissions"] = (key, out)
    return out


def _emissions_uncached(theta: ThetaParams, st: Stacked, want_grad=False):
    T = st.design.shape[0]
    n = theta.n_states
    logf = np.zeros((T, n))
    grads = {}
    for name, p in theta.state_params.items():
        fam = theta.families[name]
        x = st.obs[name]
        ok = ~np.isnan(x)
        xv = x[ok][:, None]
        if fam == "gamma":
            mean, shape = p[:, 0], p[:, 1]
            if np.any(xv <= 0):
                raise DomainError(f"stream {name!r} has nonpositive values")
            logf[ok] += _gamma_logpdf(xv, mean, shape)
            if want_grad:
                g = np.zeros((T, n, 2))
                g[ok, :, 0] = shape * (xv / mean - 1.0)
                g[ok, :, 1] = shape * (np.log(shape / mean) + 1.0 - psi(shape) + np.log(xv) - xv / mean)
                grads[name] = g
        else:
            loc, kappa = p[:, 0], p[:, 1]
            ang = wrap_angle(xv)
            logf[ok] += _vonmises_logpdf(ang, loc, kappa)
            if want_grad:
                g = np.zeros((T, n, 2))
                g[ok, :, 0] = kappa * np.sin(ang - loc)
                g[ok, :, 1] = kappa * (np.cos(ang - loc) - bessel_ratio(kappa))
                grads[name] = g
    return logf, grads


def _tpm(coeffs, st: Stacked):
    if st.design.shape[1] == 1:
        # intercept-only: one matrix for every step
        return np.broadcast_to(tpm_series(coeffs, st.design[:1]), (st.design.shape[0],) + coeffs.shape[1:])
    return tpm_series(coeffs, st.design)


def _regime_terms(theta: ThetaParams, beta0: Optional[Beta0], st: Stacked, b: float):
    GB = _tpm(theta.coeffs.B, st)
    starts = st.starts[:-1]
    if beta0 is None:
        init = np.repeat(theta.delta_B[None, :], starts.size, axis=0)
        return GB, None, GB, init, None, None
    if theta.coeffs.D is None or theta.delta_D is None:
        raise DomainError("two-regime evaluation needs disturbed-regime coefficients and delta_D")
    if len(beta0) != st.u.shape[1]:
        raise DomainError(f"beta0 has {len(beta0)} entries, data has {st.u.shape[1]} threshold slots")
    GD = _tpm(theta.coeffs.D, st)
    z = b * (st.u @ beta0.values - 1.0)
    nu = np.where(st.mask, 0.0, expit(z))
    dnu_dz = np.where(st.mask, 0.0, expit(z) * expit(-z))
    gam = GB + nu[:, None, None] * (GD - GB)
    nus = nu[starts][:, None]
    init = (1.0 - nus) * theta.delta_B[None, :] + nus * theta.delta_D[None, :]
    return GB, GD, gam, init, nu, dnu_dz


def nu_series(beta0: Beta0, data: TrackData, b: float) -> np.ndarray:
    st = data.stacked()
    z = b * (st.u @ beta0.values - 1.0)
    return np.where(st.mask, 0.0, expit(z))


def forward_loglik(theta: ThetaParams, beta0: Optional[Beta0], data: TrackData, b: float = 500.0) -> float:
    """Log-likelihood summed over tracks.

    With ``beta0=None`` the model is the one-regime HMM built from the
    baseline coefficients and ``delta_B``.
    """
    st = data.stacked()
    logf, _ = _emissions(theta, st)
    _, _, gam, init, _, _ = _regime_terms(theta, beta0, st, b)
    return float(_kernels.forward_loglik(logf, gam, init, st.starts))


def penalized_loglik(theta, beta0: Beta0, data, lam: float, b: float = 500.0) -> float:
    if lam < 0:
        raise DomainError("lambda must be nonnegative")
    ll = forward_loglik(theta, beta0, data, b)
    return ll - lam * float(beta0.values.sum()) if lam else ll


def _softmax_back(G, dG):
    # d/d eta for row-softmax G given upstream dG, both (T, N, N)
    return G * (dG - np.sum(dG * G, axis=-1, keepdims=True))


def _coef_back(G, dG, design):
    # gradient w.r.t. coefficient array (1 + C, N, N) through the row softmax
    if design.shape[1] == 1:
        # constant G: the backward map is linear in dG, so sum over t first
        return _softmax_back(G[0], dG.sum(axis=0))[None]
    return np.einsum("tc,tij->cij", design, _softmax_back(G, dG))


def _logit_back(delta, g):
    return (delta * (g - np.dot(delta, g)))[1:]


def loglik_and_grad(theta: ThetaParams, beta0: Optional[Beta0], st: Stacked, b: float, layout: ParamLayout):
    """Log-likelihood and its gradient over the layout's working vector."""
    logf, egrad = _emissions(theta, st, want_grad=True)
    GB, GD, gam, init, nu, dnu_dz = _regime_terms(theta, beta0, st, b)
    ll, post, g_gam, g_init = _kernels.forward_backward(logf, gam, init, st.starts)
    starts = st.starts[:-1]
    grad = np.zeros(layout.size)

    blocks = [np.einsum("tj,tjk->jk", post, egrad[name]) for name, _ in layout.spec.streams]
    grad[layout.slices["state"]] = np.concatenate([x.ravel() for x in blocks]) if blocks else []

    if beta0 is None:
        dB = _coef_back(GB, g_gam, st.design)
        layout.scatter_coef_grad(grad, dB)
        if "delta_B" in layout.slices:
            grad[layout.slices["delta_B"]] = _logit_back(theta.delta_B, g_init.sum(axis=0))
        return ll, grad

    w = nu[:, None, None]
    dB = _coef_back(GB, (1.0 - w) * g_gam, st.design)
    dD = _coef_back(GD, w * g_gam, st.design)
    dnu = np.einsum("tij,tij->t", g_gam, GD - GB)
    nus = nu[starts][:, None]
    dnu[starts] = g_init @ (theta.delta_D - theta.delta_B)
    layout.scatter_coef_grad(grad, dB, dD)
    if "delta_B" in layout.slices:
        grad[layout.slices["delta_B"]] = _logit_back(theta.delta_B, ((1.0 - nus) * g_init).sum(axis=0))
        grad[layout.slices["delta_D"]] = _logit_back(theta.delta_D, (nus * g_init).sum(axis=0))
    beta = beta0.values
    grad[layout.slices["log_beta"]] = b * beta * ((dnu * dnu_dz) @ st.u)
    return ll, grad


def layout_for(theta: ThetaParams, beta0: Optional[Beta0], data: TrackData, spec: Optional[ModelSpec] = None,
               estimate_delta: bool = True) -> ParamLayout:
    if spec is None:
        C = theta.coeffs.B.shape[0] - 1
        spec = ModelSpec(
            n_states=theta.n_states,
            streams=tuple(theta.families.items()),
            tpm_covariates=tuple(f"w{m}" for m in range(C)),
            threshold_covariates=tuple(f"u{i}" for i in range(data.p2)),
        )
    return ParamLayout(spec, two_regime=beta0 is not None, estimate_delta=estimate_delta)


def objective_gradient(theta, beta0: Beta0, data: TrackData, lam: float, b: float = 500.0,
                       layout: Optional[ParamLayout] = None, method: str = "analytic", fd_step: float = 1e-5):
    """Gradient of the penalized log-likelihood over the working parameters.

    ``method="fd"`` uses central differences on the working scale instead of
    the analytic recursion.
    """
    layout = layout or layout_for(theta, beta0, data)
    st = data.stacked()
    if method == "analytic":
        _, g = loglik_and_grad(theta, beta0, st, b, layout)
        if beta0 is not None:
            g[layout.slices["log_beta"]] -= lam * beta0.values
        return g
    if method != "fd":
        raise ValueError(f"unknown gradient method {method!r}")
    w0 = layout.pack(theta, beta0)

    def f(w):
        th, be = layout.unpack(w, theta)
        return penalized_loglik(th, be, data, lam, b) if be is not None else forward_loglik(th, None, data, b)

    g = np.empty_like(w0)
    for i in range(w0.size):
        e = np.zeros_like(w0)
        e[i] = fd_step
        g[i] = (f(w0 + e) - f(w0 - e)) / (2 * fd_step)
    return g


def viterbi(theta: ThetaParams, beta0: Optional[Beta0], data: TrackData, b: float = 500.0) -> list:
    """Most probable state path per track under the per-step mixed transition
    matrices. Ties go to the lower state index."""
    st = data.stacked()
    logf, _ = _emissions(theta, st)
    _, _, gam, init, _, _ = _regime_terms(theta, beta0, st, b)
    with np.errstate(divide="ignore"):
        path = _kernels.viterbi(logf, np.log(gam), np.log(init), st.starts)
    return [path[s:e] for s, e in zip(st.starts[:-1], st.starts[1:])]


def state_occupancy(paths, n_states: Optional[int] = None) -> np.ndarray:
    """Fraction of time steps allocated to each state."""
    flat = np.concatenate([np.asarray(p, dtype=int).ravel() for p in paths]) if len(paths) else np.array([], int)
    if flat.size == 0:
        raise InputError("no decoded states")
    n = n_states or int(flat.max()) + 1
    return np.bincount(flat, minlength=n) / flat.size

"""Penalized maximum-likelihood fitting and penalty selection.

Pipeline: one-regime (null) fit -> progressive-sharpness THMM initializer ->
alternating penalized mode / closed-form lambda update until lambda settles.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .exceptions import ConvergenceError, DomainError
from .likelihood import TrackData, loglik_and_grad, nu_series
from .model import (Beta0, ModelSpec, ParamLayout, RegimeCoefficients, ThetaParams, _softmax_rows,
                    persistence_to_coeffs, threshold_original_scale)

log = logging.getLogger(__name__)


@dataclass
class FitOptions:
    n_starts: int = 50
    sharpness_schedule: tuple = (5.0, 25.0, 100.0, 250.0, 500.0)
    target_b: Optional[float] = None  # None: ModelSpec.sharpness_target
    epsilon_sep: float = 0.15
    separation_weight: float = 1e4
    qreml_tol: float = 1e-3
    qreml_max_iter: int = 50
    inner_opt_tol: float = 1e-6
    inner_max_iter: int = 3000
    fd_step: float = 1e-5
    hessian_jitter: tuple = (1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2)
    lambda_max: float = 1e8
    detection_tol: float = 1e-3
    estimate_delta: bool = True
    perturb_sd: float = 0.2
    seed: int = 0

    def __post_init__(self):
        sched = tuple(float(b) for b in self.sharpness_schedule)
        if not sched or any(b <= 0 for b in sched) or any(b2 <= b1 for b1, b2 in zip(sched, sched[1:])):
            raise DomainError("sharpness schedule must be strictly increasing and positive")
        self.sharpness_schedule = sched
        if not 0 < self.epsilon_sep < 1:
            raise DomainError("epsilon_sep must lie in (0, 1)")
        if self.n_starts < 1:
            raise DomainError("n_starts must be >= 1")

    def b_target(self, spec: ModelSpec) -> float:
        return float(self.target_b if self.target_b is not None else spec.sharpness_target)


@dataclass
class NullFit:
    theta: ThetaParams
    loglik: float
    converged: bool
    diagnostics: list = field(default_factory=list)


@dataclass
class ProgressiveFit:
    theta: ThetaParams
    beta0: Beta0
    stage_b: list
    stage_loglik: list
    diagnostics: list = field(default_factory=list)


@dataclass
class PenalizedMode:
    theta: ThetaParams
    beta0: Beta0
    lam: float
    loglik: float
    penalized: float
    separation_penalty: float
    grad_norm: float
    converged: bool
    message: str = ""


@dataclass
class HessianResult:
    matrix: np.ndarray
    logdet: float
    jitter: float


@dataclass
class FitResult:
    theta_hat: ThetaParams
    beta0_hat: Beta0
    lambda_hat: float
    loglik: float
    marginal_loglik: float
    nu_series: np.ndarray
    thresholds_original: list
    disturbance_detected: list
    qreml_iterations: int
    converged: bool
    hessian_logdet: float
    capped: bool = False
    hessian_jitter: float = 0.0
    lambda_history: list = field(default_factory=list)
    scaling: list = field(default_factory=list)
    spec: Optional[ModelSpec] = None
    options: Optional[FitOptions] = None

    @property
    def any_detected(self) -> bool:
        return bool(np.any(self.disturbance_detected))


# ---------------------------------------------------------------------------
# objective on the working scale


class _Objective:
    """Negative (penalized) log-likelihood over a subset of working parameters.

    Adds the quadratic hinge that keeps at least one diagonal transition
    probability of the two regimes ``epsilon`` apart (TPMs evaluated at the
    covariate means).
    """

    def __init__(self, data: TrackData, layout: ParamLayout, template: ThetaParams, b: float,
                 lam: float = 0.0, free=None, epsilon: Optional[float] = None, weight: float = 1e4,
                 base=None):
        self.st = data.stacked()
        self.layout = layout
        self.template = template
        self.b = b
        self.lam = lam
        self.epsilon = epsilon if layout.two_regime else None
        self.weight = weight
        self.mean_design = self.st.design.mean(axis=0)
        self.free = np.arange(layout.size) if free is None else np.asarray(free)
        self.base = None if base is None else np.array(base, dtype=float)
        self.n_eval = 0

    def full(self, x):
        if self.base is None:
            return np.asarray(x, dtype=float)
        w = self.base.copy()
        w[self.free] = x
        return w

    def separation(self, theta: ThetaParams):
        """Hinge value and its gradient w.r.t. the coefficient arrays."""
        n = theta.n_states
        xb = self.mean_design
        GB = _softmax_rows(_eta(theta.coeffs.B, xb))
        GD = _softmax_rows(_eta(theta.coeffs.D, xb))
        diff = np.diag(GB) - np.diag(GD)
        i = int(np.argmax(np.abs(diff)))
        gap = abs(diff[i])
        short = self.epsilon - gap
        if short <= 0:
            return 0.0, None, None, gap
        pen = self.weight * short ** 2
        dgap = -2.0 * self.weight * short
        sgn = 1.0 if diff[i] >= 0 else -1.0
        dB = np.zeros_like(theta.coeffs.B)
        dD = np.zeros_like(theta.coeffs.D)
        for k, (G, s) in enumerate(((GB, sgn), (GD, -sgn))):
            # d G_ii / d eta_il = G_ii (1[l = i] - G_il)
            deta = -G[i, i] * G[i] * s * dgap
            deta[i] = 0.0
            tgt = dB if k == 0 else dD
            tgt[:, i, :] += xb[:, None] * deta[None, :]
        return pen, dB, dD, gap

    def value_grad_full(self, w):
        theta, beta0 = self.layout.unpack(w, self.template)
        ll, g = loglik_and_grad(theta, beta0, self.st, self.b, self.layout)
        val = ll
        if beta0 is not None:
            beta = beta0.values
            val -= self.lam * beta.sum()
            g[self.layout.slices["log_beta"]] -= self.lam * beta
        if self.epsilon is not None:
            pen, dB, dD, _ = self.separation(theta)
            if pen:
                val -= pen
                self.layout.scatter_coef_grad(g, -dB, -dD)
        return val, g, ll

    def __call__(self, x):
        self.n_eval += 1
        try:
            with np.errstate(all="ignore"):
                val, g, _ = self.value_grad_full(self.full(x))
        except (FloatingPointError, ZeroDivisionError, ValueError, DomainError):
            return np.inf, np.zeros(len(x))
        if not np.isfinite(val) or not np.all(np.isfinite(g)):
            return np.inf, np.zeros(len(x))
        return -val, -g[self.free]


def _eta(coef, x):
    e = np.tensordot(x, coef, axes=(0, 0))
    np.fill_diagonal(e, 0.0)
    return e


def _bounds(layout: ParamLayout, free):
    lo = np.full(layout.size, -50.0)
    hi = np.full(layout.size, 50.0)
    s = layout.slices["state"]
    lo[s], hi[s] = -30.0, 30.0
    if "log_beta" in layout.slices:
        lo[layout.slices["log_beta"]] = -40.0
        hi[layout.slices["log_beta"]] = 10.0
    return list(zip(lo[free], hi[free]))


def _optimize(obj: _Objective, x0, options: FitOptions):
    res = minimize(obj, x0, jac=True, method="L-BFGS-B", bounds=_bounds(obj.layout, obj.free),
                   options={"maxiter": options.inner_max_iter, "gtol": options.inner_opt_tol,
                            "ftol": 1e-15, "maxcor": 30, "maxls": 40})
    x = res.x
    f, g = obj(x)
    gnorm = float(np.max(np.abs(g))) if np.isfinite(f) else np.inf
    if np.isfinite(f) and gnorm > options.inner_opt_tol:
        x, f, gnorm = _newton_polish(obj, x, f, options)
    return x, f, gnorm, bool(np.isfinite(f) and gnorm <= max(options.inner_opt_tol, 1e-3)), str(res.message)


def _newton_polish(obj: _Objective, x, f, options: FitOptions, max_steps: int = 6):
    """A few damped Newton steps from a quasi-Newton solution, accepted only
    when the objective does not increase."""
    _, g = obj(x)
    bounds = np.array(_bounds(obj.layout, obj.free))
    for _ in range(max_steps):
        gnorm = float(np.max(np.abs(g)))
        if gnorm <= options.inner_opt_tol:
            break
        H = _fd_jacobian(lambda z: obj(z)[1], x, options.fd_step)
        H = 0.5 * (H + H.T)
        try:
            np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            break
        step = np.linalg.solve(H, g)
        accepted = False
        for t in (1.0, 0.5, 0.25, 0.1):
            xn = np.clip(x - t * step, bounds[:, 0], bounds[:, 1])
            fn, gn = obj(xn)
            if np.isfinite(fn) and fn <= f + 1e-10 * abs(f):
                x, f, g = xn, fn, gn
                accepted = True
                break
        if not accepted:
            break
    return x, f, float(np.max(np.abs(g)))


def _fd_jacobian(grad, x, h):
    n = x.size
    J = np.empty((n, n))
    for j in range(n):
        hj = h * max(1.0, abs(x[j]))
        e = np.zeros(n)
        e[j] = hj
        J[:, j] = (grad(x + e) - grad(x - e)) / (2 * hj)
    return J


def _perturb(w, idx, rng, sd):
    out = np.array(w, dtype=float)
    out[idx] = out[idx] + sd * rng.standard_normal(len(idx)) * np.maximum(1.0, np.abs(out[idx]))
    return out


# ---------------------------------------------------------------------------
# multi-start


@dataclass
class StartRecord:
    index: int
    objective: float
    converged: bool
    message: str = ""


def multi_start(fit_procedure: Callable, n_starts: int, seed: int = 0):
    """Run ``fit_procedure(index, rng)`` for each start and keep the best.

    ``fit_procedure`` returns ``(objective, result, converged, message)``
    where larger objective is better. Start 0 is expected to be the
    unperturbed initializer. Returns ``(best_result, records)``.
    """
    if n_starts < 1:
        raise DomainError("n_starts must be >= 1")
    seeds = np.random.SeedSequence(seed).spawn(n_starts)
    records, results = [], []
    for i in range(n_starts):
        rng = np.random.default_rng(seeds[i])
        try:
            obj, res, conv, msg = fit_procedure(i, rng)
        except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
            obj, res, conv, msg = -np.inf, None, False, f"{type(exc).__name__}: {exc}"
        records.append(StartRecord(i, float(obj), bool(conv), msg))
        results.append(res)
    ok = [r for r in records if np.isfinite(r.objective) and results[r.index] is not None]
    if not ok:
        raise ConvergenceError("all starts failed", records)
    best = sorted(ok, key=lambda r: (-r.objective, r.index))[0]
    return results[best.index], records


# ---------------------------------------------------------------------------
# null model


def initial_theta(data: TrackData, spec: ModelSpec, persistence: float = 0.8) -> ThetaParams:
    """Data-driven starting values: states are ordered by quantile groups of
    the first gamma stream (or the first stream)."""
    st = data.stacked()
    n = spec.n_states
    key_name = next((nm for nm, fam in spec.streams if fam == "gamma"), spec.streams[0][0])
    key = st.obs[key_name]
    ok = ~np.isnan(key)
    qs = np.quantile(key[ok], np.linspace(0, 1, n + 1))
    group = np.clip(np.searchsorted(qs, key, side="right") - 1, 0, n - 1)
    state = {}
    for name, fam in spec.streams:
        x = st.obs[name]
        p = np.empty((n, 2))
        for i in range(n):
            xi = x[(group == i) & ~np.isnan(x)]
            if xi.size < 2:
                xi = x[~np.isnan(x)]
            if fam == "gamma":
                m, v = xi.mean(), xi.var()
                p[i] = (m, np.clip(m * m / max(v, 1e-12), 0.1, 1e3))
            else:
                C, S = np.cos(xi).mean(), np.sin(xi).mean()
                R = min(np.hypot(C, S), 0.95)
                kappa = R * (2 - R * R) / (1 - R * R)
                p[i] = (np.arctan2(S, C), max(kappa, 0.05))
        state[name] = p
    B = np.zeros((1 + spec.n_cov, n, n))
    if n > 1:
        B[0] = persistence_to_coeffs(np.full(n, persistence))[0]
    return ThetaParams(state, RegimeCoefficients(B, B.copy()), np.full(n, 1.0 / n), np.full(n, 1.0 / n),
                       dict(spec.streams))


def fit_null(data: TrackData, spec: ModelSpec, options: FitOptions, init: Optional[ThetaParams] = None) -> NullFit:
    """Multi-start maximum likelihood for the one-regime HMM."""
    layout = ParamLayout(spec, two_regime=False, estimate_delta=options.estimate_delta)
    template = init or initial_theta(data, spec)
    obj = _Objective(data, layout, template, b=1.0)
    w0 = layout.pack(template)

    def run(i, rng):
        x0 = w0 if i == 0 else _perturb(w0, np.arange(layout.size), rng, options.perturb_sd)
        x, f, gnorm, conv, msg = _optimize(obj, x0, options)
        theta, _ = layout.unpack(x, template)
        return -f, theta, conv, msg

    theta, records = multi_start(run, options.n_starts, options.seed)
    ll = -obj(layout.pack(theta))[0]
    return NullFit(_order_states(theta, spec), ll, any(r.converged for r in records), records)


def _order_states(theta: ThetaParams, spec: ModelSpec) -> ThetaParams:
    """Canonical labelling: decreasing mean of the first gamma stream."""
    name = next((nm for nm, fam in spec.streams if fam == "gamma"), None)
    if name is None:
        return theta
    perm = np.argsort(-theta.state_params[name][:, 0], kind="stable")
    return theta.permuted(perm)


# ---------------------------------------------------------------------------
# two-regime fits


def _beta_start(data: TrackData, rng, quantile: Optional[float] = None) -> Beta0:
    st = data.stacked()
    vals = []
    for i in range(st.u.shape[1]):
        ui = st.u[~st.mask, i]
        ui = ui[ui > 0]
        q = quantile if quantile is not None else rng.uniform(0.2, 0.9)
        thr = np.quantile(ui, q) if ui.size else 0.5
        vals.append(1.0 / max(thr, 1e-3))
    return Beta0.from_values(vals)


def _two_regime_template(null_theta: ThetaParams, spec: ModelSpec, beta0: Beta0, rng=None, shift=1.0):
    theta = null_theta.copy()
    D = theta.coeffs.B.copy()
    n = spec.n_states
    if n > 1:
        # lower disturbed-regime persistence so the regimes start apart
        D[0] = D[0] + shift
        if rng is not None:
            oi, oj = np.where(~np.eye(n, dtype=bool))
            D[0, oi, oj] += 0.5 * rng.standard_normal(oi.size)
    theta.coeffs = RegimeCoefficients(theta.coeffs.B, D)
    theta.delta_D = theta.delta_B.copy()
    return theta, beta0


def progressive_sharpness_fit(data: TrackData, spec: ModelSpec, null_fit: NullFit, options: FitOptions,
                              schedule=None) -> ProgressiveFit:
    """Unpenalized THMM fit with state-dependent parameters held at the null
    estimates, warm-started through an increasing sharpness schedule."""
    schedule = tuple(schedule or options.sharpness_schedule)
    layout = ParamLayout(spec, two_regime=True, estimate_delta=options.estimate_delta)
    free = np.setdiff1d(np.arange(layout.size), np.arange(layout.size)[layout.slices["state"]])

    def run(i, rng):
        beta = _beta_start(data, rng, 0.5 if i == 0 else None)
        theta, beta = _two_regime_template(null_fit.theta, spec, beta, None if i == 0 else rng)
        w = layout.pack(theta, beta)
        stage_ll = []
        conv = True
        for b in schedule:
            obj = _Objective(data, layout, theta, b, lam=0.0, free=free, epsilon=options.epsilon_sep,
                             weight=options.separation_weight, base=w)
            x, f, gnorm, c, msg = _optimize(obj, w[free], options)
            if not np.isfinite(f):
                raise ValueError(f"stage b={b} failed: {msg}")
            if not c:
                conv = False
                log.debug("progressive stage b=%s stopped with gradient %.3g (%s)", b, gnorm, msg)
            w = obj.full(x)
            stage_ll.append(obj.value_grad_full(w)[2])
        th, be = layout.unpack(w, theta)
        return -f, (th, be, stage_ll), conv, ""

    (theta, beta0, stage_ll), records = multi_start(run, options.n_starts, options.seed + 1)
    if not any(r.converged for r in records):
        warnings.warn("progressive sharpness stages did not fully converge; using best-so-far", RuntimeWarning)
    return ProgressiveFit(theta, beta0, list(schedule), stage_ll, records)


def fit_penalized(data: TrackData, spec: ModelSpec, lam: float, init, options: FitOptions,
                  b: Optional[float] = None) -> PenalizedMode:
    """Mode of the lasso-penalized log-likelihood (plus separation hinge) at
    fixed lambda, over all working parameters."""
    if lam < 0:
        raise DomainError("lambda must be nonnegative")
    theta0, beta0 = init
    b = options.b_target(spec) if b is None else b
    layout = ParamLayout(spec, two_regime=True, estimate_delta=options.estimate_delta)
    obj = _Objective(data, layout, theta0, b, lam=lam, epsilon=options.epsilon_sep,
                     weight=options.separation_weight)
    x, f, gnorm, conv, msg = _optimize(obj, layout.pack(theta0, beta0), options)
    val, _, ll = obj.value_grad_full(x)
    theta, beta = layout.unpack(x, theta0)
    pen_sep = obj.separation(theta)[0]
    return PenalizedMode(theta, beta, lam, float(ll), float(val + pen_sep), pen_sep, gnorm, conv, msg)


def fit_restricted(data: TrackData, spec: ModelSpec, options: FitOptions, null_fit: Optional[NullFit] = None):
    """Unpenalized THMM (lambda = 0) at the target sharpness; returns
    ``(PenalizedMode, null_fit)``."""
    null_fit = null_fit or fit_null(data, spec, options)
    prog = progressive_sharpness_fit(data, spec, null_fit, options)
    return fit_penalized(data, spec, 0.0, (prog.theta, prog.beta0), options), null_fit


# ---------------------------------------------------------------------------
# Laplace approximation and qREML


def negative_hessian(grad: Callable, x, fd_step: float = 1e-5, jitter=(1e-8, 1e-6, 1e-4, 1e-2),
                     steps=None) -> HessianResult:
    """Central-difference negative Hessian of an objective given its gradient.

    The result is symmetrized; if it is not positive definite the smallest
    jitter (ridge) from ``jitter`` that makes it so is added and recorded.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    H = np.empty((n, n))
    for j in range(n):
        hj = steps[j] if steps is not None else fd_step * max(1.0, abs(x[j]))
        e = np.zeros(n)
        e[j] = hj
        H[:, j] = -(np.asarray(grad(x + e)) - np.asarray(grad(x - e))) / (2 * hj)
    H = 0.5 * (H + H.T)
    for jit in (0.0,) + tuple(jitter):
        try:
            L = np.linalg.cholesky(H + jit * np.eye(n))
        except np.linalg.LinAlgError:
            continue
        return HessianResult(H + jit * np.eye(n), float(2.0 * np.log(np.diag(L)).sum()), jit)
    raise np.linalg.LinAlgError("negative Hessian not positive definite after maximum jitter")


def mode_hessian(data: TrackData, spec: ModelSpec, mode: PenalizedMode, options: FitOptions,
                 lam: Optional[float] = None, b: Optional[float] = None) -> HessianResult:
    """Negative Hessian of the penalized objective at a mode, over the
    unpenalized working parameters and the threshold coefficients on their
    natural (not log) scale."""
    lam = mode.lam if lam is None else lam
    b = options.b_target(spec) if b is None else b
    layout = ParamLayout(spec, two_regime=True, estimate_delta=options.estimate_delta)
    obj = _Objective(data, layout, mode.theta, b, lam=lam, epsilon=options.epsilon_sep,
                     weight=options.separation_weight)
    w = layout.pack(mode.theta, mode.beta0)
    sl = layout.slices["log_beta"]
    v = w.copy()
    v[sl] = np.exp(w[sl])

    def grad_v(vv):
        ww = vv.copy()
        ww[sl] = np.log(np.maximum(vv[sl], 1e-300))
        _, g, _ = obj.value_grad_full(ww)
        g = g.copy()
        g[sl] = g[sl] / np.maximum(vv[sl], 1e-300)
        return g

    steps = options.fd_step * np.maximum(1.0, np.abs(v))
    steps[sl] = np.minimum(options.fd_step, 0.5 * v[sl])
    return negative_hessian(grad_v, v, options.fd_step, options.hessian_jitter, steps=steps)


def marginal_loglik(loglik_at_mode: float, beta0_hat, lam: float, hessian_logdet: float, p2: int) -> float:
    """Laplace approximation of the log marginal likelihood of lambda."""
    beta = beta0_hat.values if isinstance(beta0_hat, Beta0) else np.asarray(beta0_hat, dtype=float)
    return float(loglik_at_mode + p2 * np.log(lam) - lam * np.sum(beta) - 0.5 * hessian_logdet)


def qreml_update(beta0_hat, lambda_max: float = 1e8):
    """Closed-form lambda = p2 / sum(beta0). Returns ``(lambda, capped)``."""
    beta = beta0_hat.values if isinstance(beta0_hat, Beta0) else np.atleast_1d(np.asarray(beta0_hat, float))
    s = float(np.sum(beta))
    if s < 1e-12 or beta.size / s > lambda_max:
        return float(lambda_max), True
    return beta.size / s, False


@dataclass
class _Iterate:
    lam: float
    mode: PenalizedMode
    hess: Optional[HessianResult]
    marginal: float


def qreml_loop(data: TrackData, spec: ModelSpec, options: FitOptions,
               null_fit: Optional[NullFit] = None, progressive: Optional[ProgressiveFit] = None) -> FitResult:
    """Alternate penalized mode fits and lambda updates until the relative
    change in lambda drops below ``qreml_tol``."""
    if spec.p2 != data.p2:
        raise DomainError(f"spec has {spec.p2} threshold covariates, data has {data.p2}")
    null_fit = null_fit or fit_null(data, spec, options)
    if data.stacked().mask.all():
        return _null_result(data, spec, options, null_fit)
    progressive = progressive or progressive_sharpness_fit(data, spec, null_fit, options)
    lam, capped = qreml_update(progressive.beta0, options.lambda_max)
    init = (progressive.theta, progressive.beta0)
    iterates = []
    converged = False
    for it in range(options.qreml_max_iter):
        mode = fit_penalized(data, spec, lam, init, options)
        hess = _safe_hessian(data, spec, mode, options)
        marg = marginal_loglik(mode.loglik, mode.beta0, lam, hess.logdet if hess else np.nan, spec.p2)
        iterates.append(_Iterate(lam, mode, hess, marg))
        log.debug("qREML iteration %d: lambda=%.6g beta=%s", it, lam, mode.beta0.values)
        init = (mode.theta, mode.beta0)
        if capped:
            converged = True
            break
        new_lam, capped = qreml_update(mode.beta0, options.lambda_max)
        if capped:
            lam = new_lam
            continue
        if abs(new_lam - lam) <= options.qreml_tol * lam:
            converged = True
            break
        lam = new_lam
    final = iterates[-1]
    if not converged:
        finite = [i for i in iterates if np.isfinite(i.marginal)]
        final = max(finite, key=lambda i: i.marginal) if finite else final
        warnings.warn("qREML did not converge; returning the best marginal-likelihood iterate", RuntimeWarning)
    return _assemble(data, spec, options, final, iterates, converged, capped and converged)


def _null_result(data, spec, options, null_fit: NullFit) -> FitResult:
    """Every step is forced to the baseline: the fit is the one-regime HMM and
    no slot carries a threshold."""
    theta = null_fit.theta.copy()
    theta.coeffs = RegimeCoefficients(theta.coeffs.B, theta.coeffs.B.copy())
    theta.delta_D = theta.delta_B.copy()
    p2 = spec.p2
    return FitResult(theta, Beta0(np.full(p2, -np.inf)), float(options.lambda_max), float(null_fit.loglik),
                     float("nan"), np.zeros(data.T), [None] * p2, [False] * p2, 0, True, float("nan"),
                     capped=True, hessian_jitter=float("nan"), scaling=list(data.scaling), spec=spec,
                     options=options)


def _safe_hessian(data, spec, mode, options):
    try:
        return mode_hessian(data, spec, mode, options)
    except np.linalg.LinAlgError:
        return None


def detect_slots(beta0: Beta0, data: TrackData, b: float, tol: float = 1e-3) -> list:
    """Per-slot detection: some unmasked step has a slot-wise mixture
    probability above ``tol``."""
    st = data.stacked()
    out = []
    for i, beta in enumerate(beta0.values):
        nu_i = np.where(st.mask, 0.0, expit(b * (st.u[:, i] * beta - 1.0)))
        out.append(bool(np.any(nu_i > tol)))
    return out


def _assemble(data, spec, options, final: _Iterate, iterates, converged, capped) -> FitResult:
    b = options.b_target(spec)
    mode = final.mode
    nu = nu_series(mode.beta0, data, b)
    detected = detect_slots(mode.beta0, data, b, options.detection_tol)
    thresholds = []
    for i, beta in enumerate(mode.beta0.values):
        if not detected[i]:
            thresholds.append(None)
            continue
        sc = data.scaling[i] if i < len(data.scaling) else None
        thresholds.append(threshold_original_scale(beta, sc) if sc is not None else 1.0 / beta)
    hess = final.hess
    return FitResult(
        theta_hat=mode.theta,
        beta0_hat=mode.beta0,
        lambda_hat=float(final.lam),
        loglik=float(mode.loglik),
        marginal_loglik=float(final.marginal),
        nu_series=nu,
        thresholds_original=thresholds,
        disturbance_detected=detected,
        qreml_iterations=len(iterates),
        converged=bool(converged),
        hessian_logdet=float(hess.logdet) if hess else float("nan"),
        capped=bool(capped),
        hessian_jitter=float(hess.jitter) if hess else float("nan"),
        lambda_history=[float(i.lam) for i in iterates],
        scaling=list(data.scaling),
        spec=spec,
        options=options,
    )


def fit(data: TrackData, spec: ModelSpec, options: Optional[FitOptions] = None) -> FitResult:
    """Full pipeline: null fit, progressive initializer, qREML."""
    options = options or FitOptions()
    return qreml_loop(data, spec, options)

"""Parameter containers, covariate scaling, transition matrices and the
smoothed threshold mixture probability."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .exceptions import DegenerateCovariateError, DomainError, InputError

FAMILIES = ("gamma", "vonmises")


@dataclass(frozen=True)
class ModelSpec:
    """Structure of a (threshold) HMM.

    ``tpm_covariates`` are the explanatory variables of the transition
    matrices; ``share_across_regimes`` flags covariates whose slopes are
    common to the baseline and disturbed regimes.
    """

    n_states: int
    streams: tuple = (("step", "gamma"),)
    tpm_covariates: tuple = ()
    share_across_regimes: tuple = ()
    threshold_covariates: tuple = ("u",)
    sharpness_target: float = 500.0

    def __post_init__(self):
        object.__setattr__(self, "streams", tuple(tuple(s) for s in self.streams))
        object.__setattr__(self, "tpm_covariates", tuple(self.tpm_covariates))
        object.__setattr__(self, "threshold_covariates", tuple(self.threshold_covariates))
        shared = tuple(bool(s) for s in self.share_across_regimes)
        if not shared:
            shared = (False,) * len(self.tpm_covariates)
        object.__setattr__(self, "share_across_regimes", shared)
        if self.n_states < 1:
            raise DomainError("n_states must be >= 1")
        if self.sharpness_target <= 0:
            raise DomainError("sharpness must be positive")
        if len(shared) != len(self.tpm_covariates):
            raise DomainError("share_across_regimes must align with tpm_covariates")
        for name, fam in self.streams:
            if fam not in FAMILIES:
                raise DomainError(f"unknown family {fam!r} for stream {name!r}")

    @property
    def n_cov(self) -> int:
        return len(self.tpm_covariates)

    @property
    def p2(self) -> int:
        return len(self.threshold_covariates)

    def without_slots(self, drop: Sequence[int]) -> "ModelSpec":
        keep = tuple(c for i, c in enumerate(self.threshold_covariates) if i not in set(drop))
        return replace(self, threshold_covariates=keep)


@dataclass
class RegimeCoefficients:
    """Logit coefficients, arrays of shape (1 + C, N, N) with zero diagonals.

    Slice 0 holds intercepts, slice m the slope of covariate m.
    """

    B: np.ndarray
    D: Optional[np.ndarray] = None

    def __post_init__(self):
        self.B = np.array(self.B, dtype=float)
        if self.D is not None:
            self.D = np.array(self.D, dtype=float)
        for a in (self.B, self.D):
            if a is None:
                continue
            if not np.all(np.isfinite(a)):
                raise DomainError("coefficients must be finite")
            idx = np.arange(a.shape[1])
            a[:, idx, idx] = 0.0


@dataclass
class Beta0:
    log_values: np.ndarray

    def __post_init__(self):
        self.log_values = np.atleast_1d(np.asarray(self.log_values, dtype=float))

    @classmethod
    def from_values(cls, values) -> "Beta0":
        v = np.atleast_1d(np.asarray(values, dtype=float))
        with np.errstate(divide="ignore"):
            return cls(np.log(v))

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_values)

    def __len__(self):
        return self.log_values.size


@dataclass
class StandardizedCovariate:
    values: np.ndarray
    orig_min: float
    orig_max: float

    def to_original(self, v):
        return np.asarray(v) * (self.orig_max - self.orig_min) + self.orig_min


@dataclass
class ThetaParams:
    """Unpenalized parameters.

    ``state_params[stream]`` is an (N, 2) array: (mean, shape) for gamma
    streams, (location, concentration) for von Mises streams.
    """

    state_params: dict
    coeffs: RegimeCoefficients
    delta_B: np.ndarray
    delta_D: Optional[np.ndarray] = None
    families: Optional[dict] = None

    def __post_init__(self):
        self.state_params = {k: np.array(v, dtype=float) for k, v in self.state_params.items()}
        if self.families is None:
            self.families = {k: "gamma" for k in self.state_params}
        self.families = dict(self.families)
        self.delta_B = _check_prob(self.delta_B)
        if self.delta_D is not None:
            self.delta_D = _check_prob(self.delta_D)

    @property
    def n_states(self) -> int:
        return self.coeffs.B.shape[1]

    def copy(self) -> "ThetaParams":
        return ThetaParams(
            {k: v.copy() for k, v in self.state_params.items()},
            RegimeCoefficients(self.coeffs.B.copy(), None if self.coeffs.D is None else self.coeffs.D.copy()),
            self.delta_B.copy(),
            None if self.delta_D is None else self.delta_D.copy(),
            dict(self.families),
        )

    def permuted(self, perm) -> "ThetaParams":
        """Relabel states so that new state k is old state ``perm[k]``."""
        perm = np.asarray(perm)
        sp = {k: v[perm] for k, v in self.state_params.items()}
        B = self.coeffs.B[:, perm][:, :, perm]
        D = None if self.coeffs.D is None else self.coeffs.D[:, perm][:, :, perm]
        return ThetaParams(sp, RegimeCoefficients(B, D), self.delta_B[perm],
                           None if self.delta_D is None else self.delta_D[perm], dict(self.families))


def _check_prob(d):
    d = np.asarray(d, dtype=float)
    if np.any(d < 0) or abs(d.sum() - 1.0) > 1e-8:
        raise DomainError("initial distribution must be a probability vector")
    return d


def standardize(u, forced_zero_mask=None) -> StandardizedCovariate:
    """Affine map of ``u`` onto [0, 1].

    Entries flagged in ``forced_zero_mask`` do not take part in the min/max
    but are transformed by the same map.
    """
    u = np.asarray(u, dtype=float)
    if u.size < 2:
        raise DegenerateCovariateError("need at least two values to standardize")
    if not np.all(np.isfinite(u)):
        raise InputError("covariate contains non-finite values")
    ref = u if forced_zero_mask is None else u[~np.asarray(forced_zero_mask, dtype=bool)]
    if ref.size == 0:
        raise DegenerateCovariateError("every entry is masked")
    lo, hi = float(ref.min()), float(ref.max())
    if not hi > lo:
        raise DegenerateCovariateError(f"constant covariate (value {lo})")
    return StandardizedCovariate((u - lo) / (hi - lo), lo, hi)


def _softmax_rows(eta):
    eta = eta - eta.max(axis=-1, keepdims=True)
    e = np.exp(eta)
    return e / e.sum(axis=-1, keepdims=True)


def build_tpm(coeffs_k, omega_t=()) -> np.ndarray:
    """Transition matrix of one regime at one time step (multinomial logit)."""
    coeffs_k = np.asarray(coeffs_k, dtype=float)
    omega_t = np.atleast_1d(np.asarray(omega_t, dtype=float))
    if not np.all(np.isfinite(omega_t)):
        raise InputError("non-finite covariate value")
    x = np.concatenate([[1.0], omega_t])
    if x.size != coeffs_k.shape[0]:
        raise InputError(f"expected {coeffs_k.shape[0] - 1} covariates, got {omega_t.size}")
    return tpm_series(coeffs_k, x[None, :])[0]


def tpm_series(coeffs_k, design) -> np.ndarray:
    """Stack of transition matrices, shape (T, N, N), for design rows [1, omega_t]."""
    eta = np.einsum("tc,cij->tij", design, coeffs_k)
    n = coeffs_k.shape[1]
    eta[:, np.arange(n), np.arange(n)] = 0.0
    return _softmax_rows(eta)


def persistence_to_coeffs(diag) -> np.ndarray:
    """Intercept-only coefficient slice whose TPM has the requested diagonal.

    Off-diagonal mass in each row is split evenly.
    """
    diag = np.asarray(diag, dtype=float)
    n = diag.size
    if n < 2:
        raise DomainError("need at least two states")
    if np.any(diag <= 0) or np.any(diag >= 1):
        raise DomainError("persistence values must lie strictly in (0, 1)")
    off = (1.0 - diag) / (n - 1)
    out = np.repeat(np.log(off / diag)[:, None], n, axis=1)
    np.fill_diagonal(out, 0.0)
    return out[None, :, :]


def mixture_prob(beta0, u, b, mask=None):
    """Smoothed step 1{beta0 . u > 1}; a logistic with sharpness ``b``.

    ``u`` may be a single (p2,) row or a (T, p2) array. ``mask`` forces the
    probability to zero (baseline) where set.
    """
    beta = beta0.values if isinstance(beta0, Beta0) else np.asarray(beta0, dtype=float)
    u = np.asarray(u, dtype=float)
    nu = expit(b * (u @ beta - 1.0))
    if mask is not None:
        nu = np.where(mask, 0.0, nu)
    return nu


def step_indicator(beta0, u, mask=None):
    beta = beta0.values if isinstance(beta0, Beta0) else np.asarray(beta0, dtype=float)
    ind = (np.asarray(u, dtype=float) @ beta) > 1.0
    if mask is not None:
        ind = ind & ~np.asarray(mask, dtype=bool)
    return ind


def threshold_original_scale(beta0_hat, cov: StandardizedCovariate, zero_tol: float = 1e-8):
    """Back-transform a standardized-scale coefficient to a threshold in
    original covariate units. Returns ``None`` when the coefficient is shrunk
    to zero."""
    if not beta0_hat > zero_tol:
        return None
    return (1.0 / beta0_hat) * (cov.orig_max - cov.orig_min) + cov.orig_min


# working-scale parameter vector ------------------------------------------------

@dataclass
class ParamLayout:
    """Maps parameter containers to/from the flat working vector.

    Working scale: logs of gamma means/shapes and von Mises concentrations,
    raw von Mises locations, raw logit coefficients, baseline-referenced
    logits of the initial distributions and log threshold coefficients.
    """

    spec: ModelSpec
    two_regime: bool = True
    estimate_delta: bool = True
    slices: dict = field(default_factory=dict, init=False)

    def __post_init__(self):
        n, c = self.spec.n_states, self.spec.n_cov
        noff = n * (n - 1)
        sizes = [("state", 2 * n * len(self.spec.streams)), ("alpha_B", (1 + c) * noff)]
        if self.two_regime:
            sizes.append(("alpha_D", self.d_rows.size * noff))
        if self.estimate_delta and n > 1:
            sizes.append(("delta_B", n - 1))
            if self.two_regime:
                sizes.append(("delta_D", n - 1))
        if self.two_regime:
            sizes.append(("log_beta", self.spec.p2))
        start = 0
        for name, size in sizes:
            self.slices[name] = slice(start, start + size)
            start += size
        self.size = start
        self._off = np.array([(i, j) for i in range(n) for j in range(n) if i != j], dtype=int).reshape(-1, 2)

    @property
    def d_rows(self) -> np.ndarray:
        """Coefficient rows estimated separately for the disturbed regime."""
        return np.array([0] + [m + 1 for m, s in enumerate(self.spec.share_across_regimes) if not s], dtype=int)

    @property
    def off_diagonal(self):
        return self._off[:, 0], self._off[:, 1]

    def pack(self, theta: ThetaParams, beta0: Optional[Beta0] = None) -> np.ndarray:
        w = np.empty(self.size)
        n = self.spec.n_states
        blocks = []
        for name, fam in self.spec.streams:
            p = theta.state_params[name]
            if fam == "gamma":
                blocks.append(np.log(p))
            else:
                blocks.append(np.column_stack([p[:, 0], np.log(p[:, 1])]))
        w[self.slices["state"]] = np.concatenate([b.ravel() for b in blocks]) if blocks else []
        oi, oj = self.off_diagonal
        w[self.slices["alpha_B"]] = theta.coeffs.B[:, oi, oj].ravel()
        if self.two_regime:
            w[self.slices["alpha_D"]] = theta.coeffs.D[self.d_rows][:, oi, oj].ravel()
        if "delta_B" in self.slices:
            w[self.slices["delta_B"]] = _prob_to_logits(theta.delta_B)
        if "delta_D" in self.slices:
            w[self.slices["delta_D"]] = _prob_to_logits(theta.delta_D)
        if self.two_regime:
            w[self.slices["log_beta"]] = beta0.log_values
        return w

    def unpack(self, w, template: ThetaParams):
        """Inverse of :meth:`pack`; fixed quantities come from ``template``."""
        n, c = self.spec.n_states, self.spec.n_cov
        state = {}
        blk = np.asarray(w[self.slices["state"]]).reshape(len(self.spec.streams), n, 2)
        for k, (name, fam) in enumerate(self.spec.streams):
            if fam == "gamma":
                state[name] = np.exp(blk[k])
            else:
                state[name] = np.column_stack([blk[k][:, 0], np.exp(blk[k][:, 1])])
        oi, oj = self.off_diagonal
        noff = oi.size
        B = np.zeros((1 + c, n, n))
        B[:, oi, oj] = np.asarray(w[self.slices["alpha_B"]]).reshape(1 + c, noff)
        D = None
        if self.two_regime:
            D = B.copy()
            vals = np.asarray(w[self.slices["alpha_D"]]).reshape(-1, noff)
            for k, r in enumerate(self.d_rows):
                D[r, oi, oj] = vals[k]
        delta_B = _logits_to_prob(w[self.slices["delta_B"]]) if "delta_B" in self.slices else template.delta_B
        delta_D = None
        if self.two_regime:
            if "delta_D" in self.slices:
                delta_D = _logits_to_prob(w[self.slices["delta_D"]])
            else:
                delta_D = template.delta_D if template.delta_D is not None else template.delta_B
        theta = ThetaParams(state, RegimeCoefficients(B, D), delta_B, delta_D, dict(self.spec.streams))
        beta0 = Beta0(np.array(w[self.slices["log_beta"]])) if self.two_regime else None
        return theta, beta0

    def scatter_coef_grad(self, grad, dB, dD=None):
        """Add gradients w.r.t. full coefficient arrays (1 + C, N, N) into the
        working-vector gradient ``grad``."""
        oi, oj = self.off_diagonal
        dB = np.array(dB, dtype=float)
        if dD is not None and self.two_regime:
            shared = [m + 1 for m, s in enumerate(self.spec.share_across_regimes) if s]
            dB[shared] += dD[shared]
            grad[self.slices["alpha_D"]] += dD[self.d_rows][:, oi, oj].ravel()
        grad[self.slices["alpha_B"]] += dB[:, oi, oj].ravel()
        return grad

    def labels(self) -> list:
        """Human-readable names of the working parameters, in order."""
        out = []
        n = self.spec.n_states
        for name, fam in self.spec.streams:
            pnames = ("log_mean", "log_shape") if fam == "gamma" else ("location", "log_kappa")
            for i in range(n):
                out += [f"{name}[{i}].{p}" for p in pnames]
        covs = ["intercept"] + list(self.spec.tpm_covariates)
        oi, oj = self.off_diagonal
        for c in covs:
            out += [f"alpha_B.{c}[{i},{j}]" for i, j in zip(oi, oj)]
        if self.two_regime:
            for r in self.d_rows:
                out += [f"alpha_D.{covs[r]}[{i},{j}]" for i, j in zip(oi, oj)]
        if "delta_B" in self.slices:
            out += [f"delta_B.logit[{i}]" for i in range(1, n)]
        if "delta_D" in self.slices:
            out += [f"delta_D.logit[{i}]" for i in range(1, n)]
        if self.two_regime:
            out += [f"log_beta[{i}]" for i in range(self.spec.p2)]
        return out


def _prob_to_logits(d):
    d = np.clip(np.asarray(d, dtype=float), 1e-300, None)
    return np.log(d[1:]) - np.log(d[0])


def _logits_to_prob(w):
    z = np.concatenate([[0.0], np.asarray(w, dtype=float)])
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()

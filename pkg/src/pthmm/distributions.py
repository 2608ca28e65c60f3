"""State-dependent densities and samplers.

Gamma observations use a mean/shape parameterization (rate = shape / mean).
Von Mises angles are reduced to (-pi, pi] before evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .exceptions import DomainError

LOG_2PI = float(np.log(2.0 * np.pi))

# series for kappa below this, asymptotic expansion above
_BESSEL_SWITCH = 15.0


@dataclass(frozen=True)
class GammaParams:
    mean: float
    shape: float

    def __post_init__(self):
        if not (np.all(np.asarray(self.mean) > 0) and np.all(np.asarray(self.shape) > 0)):
            raise DomainError(f"gamma mean and shape must be positive, got {self.mean}, {self.shape}")

    @property
    def rate(self):
        return np.asarray(self.shape) / np.asarray(self.mean)


@dataclass(frozen=True)
class VonMisesParams:
    location: float
    concentration: float

    def __post_init__(self):
        if not np.all(np.asarray(self.concentration) >= 0):
            raise DomainError(f"von Mises concentration must be >= 0, got {self.concentration}")
        object.__setattr__(self, "location", wrap_angle(self.location))


def wrap_angle(x):
    """Reduce angles to the principal range (-pi, pi]."""
    x = np.asarray(x, dtype=float)
    y = np.mod(x + np.pi, 2.0 * np.pi) - np.pi
    # mod maps +pi to -pi; keep the closed end at +pi
    y = np.where(y == -np.pi, np.pi, y)
    return float(y) if y.ndim == 0 else y


def _log_bessel_series(order, k):
    half = k / 2.0
    term = np.power(half, order)
    total = term.copy()
    for j in range(1, 80):
        term = term * half * half / (j * (j + order))
        total = total + term
    return np.log(total)


def _log_bessel_asymptotic(order, k):
    mu = 4.0 * order * order
    term = np.ones_like(k)
    total = np.ones_like(k)
    active = np.ones(k.shape, dtype=bool)
    for j in range(1, 60):
        nxt = term * (-(mu - (2 * j - 1) ** 2)) / (j * 8.0 * k)
        # stop each entry once terms begin to grow (divergent tail)
        active &= np.abs(nxt) < np.abs(term)
        term = np.where(active, nxt, 0.0)
        total = total + term
        if not active.any():
            break
    return k - 0.5 * np.log(2.0 * np.pi * k) + np.log(total)


def log_bessel_i(order: int, kappa):
    """log I_order(kappa) for order 0 or 1 and kappa >= 0."""
    k = np.atleast_1d(np.asarray(kappa, dtype=float))
    if np.any(k < 0):
        raise DomainError("kappa must be nonnegative")
    out = np.empty_like(k)
    small = k < _BESSEL_SWITCH
    if small.any():
        with np.errstate(divide="ignore"):
            out[small] = _log_bessel_series(order, k[small])
    if (~small).any():
        out[~small] = _log_bessel_asymptotic(order, k[~small])
    return out[0] if np.ndim(kappa) == 0 else out


def log_i0(kappa):
    return log_bessel_i(0, kappa)


def bessel_ratio(kappa):
    """I1(kappa) / I0(kappa), the mean resultant length of a von Mises law."""
    k = np.asarray(kappa, dtype=float)
    with np.errstate(divide="ignore"):
        r = np.exp(log_bessel_i(1, k) - log_bessel_i(0, k))
    return np.where(k == 0, 0.0, r)


def gamma_logpdf(x, p: GammaParams):
    """Log density of a gamma variable with the given mean and shape.

    Broadcasts ``x`` against array-valued parameters.
    """
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise DomainError("gamma support is x > 0")
    mean = np.asarray(p.mean, dtype=float)
    shape = np.asarray(p.shape, dtype=float)
    return _gamma_logpdf(x, mean, shape)


def _gamma_logpdf(x, mean, shape):
    rate = shape / mean
    return shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x


def vonmises_logpdf(angle, p: VonMisesParams):
    angle = np.asarray(angle, dtype=float)
    if not np.all(np.isfinite(angle)):
        raise DomainError("angles must be finite")
    kappa = np.asarray(p.concentration, dtype=float)
    return _vonmises_logpdf(wrap_angle(angle), np.asarray(p.location, dtype=float), kappa)


def _vonmises_logpdf(angle, location, kappa):
    return kappa * np.cos(angle - location) - LOG_2PI - log_i0(kappa)


def gamma_sample(p: GammaParams, rng: np.random.Generator, size=None):
    mean = np.asarray(p.mean, dtype=float)
    shape = np.asarray(p.shape, dtype=float)
    return rng.gamma(shape, mean / shape, size=size)


def vonmises_sample(p: VonMisesParams, rng: np.random.Generator, size=None):
    """Best & Fisher (1979) rejection sampler, vectorized over ``size`` draws."""
    kappa = float(p.concentration)
    n = 1 if size is None else int(np.prod(size))
    if kappa < 1e-8:
        out = rng.uniform(-np.pi, np.pi, n)
        out = wrap_angle(out + p.location)
    else:
        tau = 1.0 + np.sqrt(1.0 + 4.0 * kappa * kappa)
        rho = (tau - np.sqrt(2.0 * tau)) / (2.0 * kappa)
        r = (1.0 + rho * rho) / (2.0 * rho)
        out = np.empty(n)
        filled = 0
        while filled < n:
            m = max(16, int(1.3 * (n - filled)))
            u1, u2, u3 = rng.random((3, m))
            z = np.cos(np.pi * u1)
            f = (1.0 + r * z) / (r + z)
            c = kappa * (r - f)
            with np.errstate(divide="ignore"):
                ok = (c * (2.0 - c) - u2 > 0) | (np.log(c / u2) + 1.0 - c >= 0)
            theta = np.sign(u3[ok] - 0.5) * np.arccos(np.clip(f[ok], -1.0, 1.0))
            take = min(theta.size, n - filled)
            out[filled:filled + take] = theta[:take]
            filled += take
        out = wrap_angle(out + p.location)
    out = np.atleast_1d(out)
    if size is None:
        return float(out[0])
    return out.reshape(size)

"""Parametric bootstrap likelihood-ratio test for the disturbed component."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .estimation import FitOptions, fit_null, fit_restricted
from .exceptions import ConvergenceError, DomainError
from .likelihood import Track, TrackData
from .model import Beta0, ModelSpec, RegimeCoefficients
from .simulation import simulate_thmm

log = logging.getLogger(__name__)


@dataclass
class BlrtConfig:
    B: int = 100
    null_slots: Optional[tuple] = None  # 0-based slots fixed at zero; None means all
    alpha: float = 0.05
    seed: int = 0
    bootstrap_starts: Optional[int] = None  # starts per bootstrap refit; None uses the fit options

    def __post_init__(self):
        if self.B < 1:
            raise DomainError("B must be >= 1")
        if not 0 < self.alpha < 1:
            raise DomainError("alpha must lie in (0, 1)")

    def null_set(self, p2: int) -> tuple:
        slots = tuple(range(p2)) if self.null_slots is None else tuple(sorted(set(self.null_slots)))
        if not slots or any(s < 0 or s >= p2 for s in slots):
            raise DomainError(f"null slots must be a nonempty subset of 0..{p2 - 1}")
        return slots


@dataclass
class BlrtResult:
    observed_lr: float
    bootstrap_lrs: list
    p_value: float
    n_failed: int
    reject: bool
    null_slots: tuple
    loglik_h0: float
    loglik_h1: float
    failures: list = field(default_factory=list)


def bootstrap_p_value(observed: float, boot) -> float:
    """Share of bootstrap statistics strictly greater than the observed one."""
    boot = np.asarray(boot, dtype=float)
    if boot.size == 0:
        return float("nan")
    return float(np.count_nonzero(boot > observed)) / boot.size


def _fit_pair(data: TrackData, spec: ModelSpec, null_slots: tuple, options: FitOptions):
    """Unpenalized fits under H0 and H1; returns ``(ll0, ll1, h0_model)``."""
    nf = fit_null(data, spec, options)
    h1, _ = fit_restricted(data, spec, options, null_fit=nf)
    keep = [i for i in range(spec.p2) if i not in null_slots]
    if not keep:
        return nf.loglik, h1.loglik, ("hmm", nf.theta, None, keep)
    spec0 = spec.without_slots(null_slots)
    data0 = data.select_slots(keep)
    h0, _ = fit_restricted(data0, spec0, options, null_fit=nf)
    return h0.loglik, h1.loglik, ("thmm", h0.theta, h0.beta0, keep)


def _simulate_from(h0, data: TrackData, rng) -> TrackData:
    kind, theta, beta0, keep = h0
    theta = theta.copy()
    tracks = []
    for tr in data.tracks:
        if kind == "hmm":
            th = theta.copy()
            th.coeffs = RegimeCoefficients(th.coeffs.B, th.coeffs.B)
            th.delta_D = th.delta_B
            u = np.zeros((len(tr), 1))
            beta = np.zeros(1)
        else:
            th = theta
            u = tr.threshold_covariates[:, keep]
            beta = beta0.values
        sim, _, _ = simulate_thmm(th, beta, u, rng, tr.baseline_mask, tr.track_id, tr.tpm_covariates)
        obs = {k: np.where(np.isnan(tr.observations[k]), np.nan, v) for k, v in sim.observations.items()}
        tracks.append(Track(obs, tr.tpm_covariates, tr.threshold_covariates, tr.baseline_mask, tr.track_id))
    return TrackData(tracks, list(data.scaling))


def _boot_job(args):
    b, seed_seq, h0, data, spec, null_slots, opts = args
    rng = np.random.default_rng(seed_seq)
    try:
        sim = _simulate_from(h0, data, rng)
        b0, b1, _ = _fit_pair(sim, spec, null_slots, replace(opts, seed=opts.seed + b + 1))
    except (ConvergenceError, np.linalg.LinAlgError, ValueError) as exc:
        return None, f"replicate {b}: {type(exc).__name__}: {exc}"
    if not (np.isfinite(b0) and np.isfinite(b1)):
        return None, f"replicate {b}: non-finite log-likelihood"
    return 2.0 * (b1 - b0), ""


def blrt(data: TrackData, spec: ModelSpec, config: BlrtConfig, options: Optional[FitOptions] = None,
         workers: int = 1) -> BlrtResult:
    """Observed LR = 2 (l_H1 - l_H0) against the bootstrap law under the fitted H0.

    H0 fixes the configured slots at zero (the plain HMM when every slot is
    null); both models are fitted without penalty. Replicates whose refits
    fail are excluded from the p-value and counted.
    """
    options = options or FitOptions()
    null_slots = config.null_set(spec.p2)
    ll0, ll1, h0 = _fit_pair(data, spec, null_slots, options)
    observed = 2.0 * (ll1 - ll0)
    boot_opts = options if config.bootstrap_starts is None else replace(options, n_starts=config.bootstrap_starts)
    seeds = np.random.SeedSequence([config.seed, 7]).spawn(config.B)
    jobs = [(b, seeds[b], h0, data, spec, null_slots, boot_opts) for b in range(config.B)]
    if workers > 1 and config.B > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_boot_job, jobs))
    else:
        outcomes = [_boot_job(j) for j in jobs]
    lrs = [lr for lr, _ in outcomes if lr is not None]
    failures = [msg for lr, msg in outcomes if lr is None]
    p = bootstrap_p_value(observed, lrs)
    return BlrtResult(float(observed), lrs, p, len(failures), bool(p < config.alpha), null_slots,
                      float(ll0), float(ll1), failures)

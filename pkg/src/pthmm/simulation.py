"""Covariate generators, THMM data simulation and the replicate harness."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .distributions import GammaParams, VonMisesParams, gamma_sample, vonmises_sample
from .exceptions import ConvergenceError, DomainError, InputError
from .likelihood import Track, TrackData
from .model import (Beta0, ModelSpec, RegimeCoefficients, ThetaParams, persistence_to_coeffs, standardize,
                    step_indicator, tpm_series)

log = logging.getLogger(__name__)

SCENARIOS = ("1a", "1b", "2a", "2b", "2c")


def gen_covariate(T: int) -> np.ndarray:
    """Deterministic disturbance covariate u_t = 20 + 10 (sin(t/150) + cos(t/650)), t = 1..T."""
    if T < 1:
        raise DomainError("T must be >= 1")
    t = np.arange(1, T + 1, dtype=float)
    return 20.0 + 10.0 * (np.sin(t / 150.0) + np.cos(t / 650.0))


def gen_binary_covariate(T: int, seed) -> np.ndarray:
    """Independent fair coin flips."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.random(T) < 0.5


def make_bivariate(u1, u2) -> np.ndarray:
    """Mutually exclusive slots: (u1, 0) where the flag is set, else (0, u1)."""
    u1 = np.asarray(u1, dtype=float)
    flag = np.asarray(u2, dtype=bool)
    if u1.shape != flag.shape:
        raise InputError("covariate and flag must be aligned")
    return np.column_stack([np.where(flag, u1, 0.0), np.where(flag, 0.0, u1)])


@dataclass(frozen=True)
class CanonicalParams:
    means: tuple = (10.0, 4.0, 1.0)
    shapes: tuple = (12.0, 10.0, 1.5)
    baseline_persistence: tuple = (0.9, 0.9, 0.9)
    disturbed_persistence: tuple = (0.9, 0.7, 0.7)

    def theta(self) -> ThetaParams:
        n = len(self.means)
        B = persistence_to_coeffs(self.baseline_persistence)
        D = persistence_to_coeffs(self.disturbed_persistence)
        sp = {"step": np.column_stack([self.means, self.shapes])}
        return ThetaParams(sp, RegimeCoefficients(B, D), np.full(n, 1 / n), np.full(n, 1 / n), {"step": "gamma"})


@dataclass
class ScenarioConfig:
    id: str
    T: int
    n_replicates: int = 50
    thresholds_original: Optional[tuple] = None
    seed: int = 0

    def __post_init__(self):
        if self.id not in SCENARIOS:
            raise DomainError(f"unknown scenario {self.id!r}")
        if self.T < 100:
            raise DomainError("T must be >= 100")
        if self.n_replicates < 0:
            raise DomainError("n_replicates must be >= 0")
        if self.thresholds_original is None:
            self.thresholds_original = default_thresholds(self.id)
        self.thresholds_original = tuple(self.thresholds_original)
        expected = 1 if self.id in ("1a", "1b") else 2
        if len(self.thresholds_original) != expected:
            raise DomainError(f"scenario {self.id} has {expected} threshold slot(s)")

    @property
    def bivariate(self) -> bool:
        return self.id.startswith("2")


def default_thresholds(scenario_id: str) -> tuple:
    return {"1a": (21.0,), "1b": (None,), "2a": (21.0, 30.0), "2b": (21.0, None), "2c": (None, None)}[scenario_id]


def scenario_spec(config: ScenarioConfig, sharpness: float = 500.0) -> ModelSpec:
    slots = ("u1", "u2") if config.bivariate else ("u",)
    return ModelSpec(3, (("step", "gamma"),), threshold_covariates=slots, sharpness_target=sharpness)


def scenario_covariates(config: ScenarioConfig, rng: np.random.Generator):
    """Raw slots (T, p2) and their per-slot scalings.

    Each slot is scaled over all of its entries, zeros included.
    """
    u = gen_covariate(config.T)
    raw = make_bivariate(u, gen_binary_covariate(config.T, rng)) if config.bivariate else u[:, None]
    scaling = [standardize(raw[:, i]) for i in range(raw.shape[1])]
    return raw, scaling


def true_beta0(thresholds_original: Sequence, scaling) -> np.ndarray:
    """Threshold coefficients on the standardized scale (0 for inactive slots)."""
    out = []
    for thr, sc in zip(thresholds_original, scaling):
        if thr is None:
            out.append(0.0)
            continue
        if not sc.orig_min < thr < sc.orig_max:
            raise DomainError(f"threshold {thr} outside covariate range [{sc.orig_min}, {sc.orig_max}]")
        out.append((sc.orig_max - sc.orig_min) / (thr - sc.orig_min))
    return np.array(out)


def simulate_thmm(theta: ThetaParams, beta0, u, seed, mask=None, track_id: str = "0",
                  tpm_covariates=None) -> tuple:
    """Draw one track from the THMM with the exact step function.

    ``u`` is the standardized (T, p2) threshold covariate. Returns
    ``(Track, states, disturbed)``. Every stream of ``theta`` must be gamma
    or von Mises; observations are drawn per state.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    T = u.shape[0]
    n = theta.n_states
    beta = beta0.values if isinstance(beta0, Beta0) else np.asarray(beta0, dtype=float)
    if beta.size != u.shape[1]:
        raise DomainError("beta0 length does not match covariate slots")
    if np.any(beta < 0) or not np.all(np.isfinite(beta)):
        raise DomainError("beta0 must be finite and nonnegative")
    disturbed = step_indicator(beta, u, mask)
    cov = np.zeros((T, 0)) if tpm_covariates is None else np.asarray(tpm_covariates, dtype=float).reshape(T, -1)
    design = np.column_stack([np.ones(T), cov])
    GB = tpm_series(theta.coeffs.B, design)
    GD = tpm_series(theta.coeffs.D if theta.coeffs.D is not None else theta.coeffs.B, design)
    dD = theta.delta_D if theta.delta_D is not None else theta.delta_B
    states = np.empty(T, dtype=np.int64)
    draws = rng.random(T)
    p0 = dD if disturbed[0] else theta.delta_B
    states[0] = min(np.searchsorted(np.cumsum(p0), draws[0], side="right"), n - 1)
    cumB = np.cumsum(GB, axis=2)
    cumD = np.cumsum(GD, axis=2)
    for t in range(1, T):
        row = (cumD if disturbed[t] else cumB)[t, states[t - 1]]
        states[t] = min(np.searchsorted(row, draws[t], side="right"), n - 1)
    obs = {}
    for name, p in theta.state_params.items():
        x = np.empty(T)
        for i in range(n):
            idx = np.flatnonzero(states == i)
            if idx.size == 0:
                continue
            if theta.families[name] == "gamma":
                x[idx] = gamma_sample(GammaParams(p[i, 0], p[i, 1]), rng, idx.size)
            else:
                x[idx] = vonmises_sample(VonMisesParams(p[i, 0], p[i, 1]), rng, idx.size)
        obs[name] = x
    track = Track(obs, cov, u, mask, track_id)
    return track, states, disturbed


def disturbance_frequency(u, beta0_true) -> float:
    """Fraction of steps where the exact indicator is on."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    return float(np.mean(step_indicator(np.asarray(beta0_true, dtype=float), u)))


def scenario_dataset(config: ScenarioConfig, replicate: int, params: CanonicalParams = CanonicalParams()):
    """One replicate: ``(TrackData, beta0_true, states)``; seeded by (seed, replicate)."""
    rng = np.random.default_rng([config.seed, replicate])
    raw, scaling = scenario_covariates(config, rng)
    u = np.column_stack([sc.values for sc in scaling])
    beta = true_beta0(config.thresholds_original, scaling)
    track, states, _ = simulate_thmm(params.theta(), beta, u, rng, track_id=f"rep{replicate}")
    return TrackData([track], scaling), beta, states


# ---------------------------------------------------------------------------
# replicate harness


@dataclass
class ReplicateRecord:
    replicate: int
    ok: bool
    beta0_true: list
    beta0_hat: list = field(default_factory=list)
    lambda_hat: float = float("nan")
    detected: list = field(default_factory=list)
    thresholds: list = field(default_factory=list)
    capped: bool = False
    converged: bool = False
    means_hat: list = field(default_factory=list)
    shapes_hat: list = field(default_factory=list)
    seconds: float = 0.0
    error: str = ""


@dataclass
class ScenarioMetrics:
    scenario: str
    T: int
    n_replicates: int
    n_ok: int
    false_positive_rate: list
    power: list
    beta0_bias: list
    beta0_sd: list
    mean_bias: list
    shape_bias: list
    median_seconds: float
    records: list

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


def _align_states(theta: ThetaParams, params: CanonicalParams):
    """Fitted state parameters reordered to the canonical order (by mean)."""
    p = theta.state_params["step"]
    order = np.argsort(-p[:, 0], kind="stable")
    truth_order = np.argsort(-np.asarray(params.means), kind="stable")
    means = np.empty(len(order))
    shapes = np.empty(len(order))
    means[truth_order] = p[order, 0]
    shapes[truth_order] = p[order, 1]
    return means, shapes


def run_replicate(config: ScenarioConfig, replicate: int, options, params: CanonicalParams = CanonicalParams(),
                  sharpness: Optional[float] = None) -> ReplicateRecord:
    from .estimation import qreml_loop

    data, beta, _ = scenario_dataset(config, replicate, params)
    spec = scenario_spec(config, sharpness or (options.target_b or 500.0))
    rec = ReplicateRecord(replicate, False, beta.tolist())
    start = time.perf_counter()
    try:
        res = qreml_loop(data, spec, options)
    except (ConvergenceError, np.linalg.LinAlgError, ValueError) as exc:
        rec.error = f"{type(exc).__name__}: {exc}"
        rec.seconds = time.perf_counter() - start
        return rec
    rec.seconds = time.perf_counter() - start
    rec.ok = True
    rec.beta0_hat = res.beta0_hat.values.tolist()
    rec.lambda_hat = res.lambda_hat
    rec.detected = list(res.disturbance_detected)
    rec.thresholds = list(res.thresholds_original)
    rec.capped = res.capped
    rec.converged = res.converged
    m, s = _align_states(res.theta_hat, params)
    rec.means_hat, rec.shapes_hat = m.tolist(), s.tolist()
    return rec


def summarize(config: ScenarioConfig, records: list, params: CanonicalParams = CanonicalParams()) -> ScenarioMetrics:
    ok = [r for r in records if r.ok]
    p2 = len(config.thresholds_original)
    fpr, power, bias, sd = [], [], [], []
    for i in range(p2):
        active = config.thresholds_original[i] is not None
        det = np.array([r.detected[i] for r in ok], dtype=float)
        rate = float(det.mean()) if det.size else float("nan")
        fpr.append(None if active else rate)
        power.append(rate if active else None)
        if active and ok:
            err = np.array([r.beta0_hat[i] - r.beta0_true[i] for r in ok])
            bias.append(float(err.mean()))
            sd.append(float(np.array([r.beta0_hat[i] for r in ok]).std(ddof=1)) if len(ok) > 1 else float("nan"))
        else:
            bias.append(None)
            sd.append(None)
    if ok:
        mb = (np.mean([r.means_hat for r in ok], axis=0) - np.asarray(params.means)).tolist()
        sb = (np.mean([r.shapes_hat for r in ok], axis=0) - np.asarray(params.shapes)).tolist()
        secs = float(np.median([r.seconds for r in ok]))
    else:
        mb, sb, secs = [], [], float("nan")
    return ScenarioMetrics(config.id, config.T, len(records), len(ok), fpr, power, bias, sd, mb, sb, secs,
                           [asdict(r) for r in records])


def _replicate_job(args):
    config, r, options, params = args
    return run_replicate(config, r, options, params)


def run_scenario(config: ScenarioConfig, options, params: CanonicalParams = CanonicalParams(),
                 progress=None, workers: int = 1) -> ScenarioMetrics:
    """Simulate and fit ``config.n_replicates`` datasets; failures are recorded
    per replicate, never raised. With ``workers > 1`` replicates run in a
    process pool; records are always ordered by replicate index."""
    jobs = [(config, r, options, params) for r in range(config.n_replicates)]
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_replicate_job, jobs))
        if progress is not None:
            for rec in records:
                progress(rec)
    else:
        records = []
        for job in jobs:
            rec = _replicate_job(job)
            records.append(rec)
            if progress is not None:
                progress(rec)
            log.info("scenario %s T=%d rep %d: beta=%s detected=%s (%.1fs)", config.id, config.T, rec.replicate,
                     rec.beta0_hat, rec.detected, rec.seconds)
    return summarize(config, records, params)


def metrics_frame(metrics: ScenarioMetrics):
    """One row per replicate, slot-indexed columns (1-based)."""
    import pandas as pd

    rows = []
    for rec in metrics.records:
        row = {"scenario": metrics.scenario, "T": metrics.T, "replicate": rec["replicate"], "ok": rec["ok"],
               "lambda_hat": rec["lambda_hat"], "capped": rec["capped"], "converged": rec["converged"]}
        for i, truth in enumerate(rec["beta0_true"]):
            k = i + 1
            row[f"beta0_true_{k}"] = truth
            row[f"beta0_hat_{k}"] = rec["beta0_hat"][i] if rec["ok"] else float("nan")
            row[f"detected_{k}"] = rec["detected"][i] if rec["ok"] else None
            row[f"threshold_{k}"] = rec["thresholds"][i] if rec["ok"] else None
        for i in range(len(rec["means_hat"]) or 3):
            row[f"mean_{i + 1}"] = rec["means_hat"][i] if rec["ok"] else float("nan")
            row[f"shape_{i + 1}"] = rec["shapes_hat"][i] if rec["ok"] else float("nan")
        row["seconds"] = rec["seconds"]
        row["error"] = rec["error"]
        rows.append(row)
    return pd.DataFrame(rows)


def report_frame(frames, params: CanonicalParams = CanonicalParams()):
    """Aggregate replicate tables into one summary row per (scenario, T):
    beta0 bias and sd per slot, detection rates (power for active slots,
    false-positive rate for inactive ones) and state-parameter biases."""
    import pandas as pd

    df = pd.concat(list(frames), ignore_index=True)
    out = []
    for (sid, T), g in df.groupby(["scenario", "T"], sort=True):
        ok = g[g["ok"].astype(bool)]
        row = {"scenario": sid, "T": int(T), "n": len(g), "n_ok": len(ok)}
        k = 1
        while f"beta0_true_{k}" in g.columns and g[f"beta0_true_{k}"].notna().any():
            truth = ok[f"beta0_true_{k}"].astype(float)
            est = ok[f"beta0_hat_{k}"].astype(float)
            rate = ok[f"detected_{k}"].astype(bool).mean() if len(ok) else float("nan")
            active = bool((truth > 0).any())
            row[f"beta0_true_{k}"] = float(truth.mean()) if len(ok) else float("nan")
            row[f"bias_{k}"] = float((est - truth).mean()) if active and len(ok) else float("nan")
            row[f"sd_{k}"] = float(est.std(ddof=1)) if active and len(ok) > 1 else float("nan")
            row[f"power_{k}"] = float(rate) if active else float("nan")
            row[f"fpr_{k}"] = float(rate) if not active else float("nan")
            k += 1
        for i, (m, s) in enumerate(zip(params.means, params.shapes), start=1):
            if f"mean_{i}" in ok.columns and len(ok):
                row[f"mean_bias_{i}"] = float(ok[f"mean_{i}"].astype(float).mean() - m)
                row[f"shape_bias_{i}"] = float(ok[f"shape_{i}"].astype(float).mean() - s)
        row["median_lambda"] = float(ok["lambda_hat"].astype(float).median()) if len(ok) else float("nan")
        out.append(row)
    return pd.DataFrame(out)


# ---------------------------------------------------------------------------
# synthetic telemetry


def telemetry_theta() -> ThetaParams:
    """Three movement states with step (km per fix) and turning-angle streams."""
    B = persistence_to_coeffs((0.9, 0.9, 0.9))
    D = persistence_to_coeffs((0.9, 0.7, 0.7))
    # distance-to-shore slopes, shared by both regimes
    slope = np.zeros((1, 3, 3))
    slope[0, 0, 1] = slope[0, 1, 2] = 0.05
    B, D = np.concatenate([B, slope]), np.concatenate([D, slope])
    sp = {"step": np.array([[2.0, 8.0], [0.8, 5.0], [0.2, 1.5]]),
          "angle": np.array([[0.0, 8.0], [0.0, 2.0], [0.0, 0.5]])}
    return ThetaParams(sp, RegimeCoefficients(B, D), np.full(3, 1 / 3), np.full(3, 1 / 3),
                       {"step": "gamma", "angle": "vonmises"})


def simulate_telemetry(n_tracks: int = 4, track_length: int = 2000, threshold_km: float = 4.0, seed=0,
                       theta: Optional[ThetaParams] = None, cadence_minutes: float = 30.0, mask_km: float = 77.0):
    """Synthetic GPS telemetry whose no-land exposure slot carries a disturbance
    threshold at ``threshold_km`` from the vessel; the land slot has none.

    Returns ``(frame, truth)`` where ``frame`` has the telemetry CSV columns
    (positions, not steps) and ``truth`` holds the generating quantities.
    """
    import pandas as pd

    from .io import destination, exposure_slots

    rng = np.random.default_rng(seed)
    theta = theta or telemetry_theta()
    frames, states_all, disturbed_all = [], [], []
    tracks_raw = []
    for k in range(n_tracks):
        t = np.arange(track_length, dtype=float)
        # a sequence of vessel passes: closest approach, speed and a land flag per pass
        vd = np.empty(track_length)
        land = np.empty(track_length, dtype=bool)
        i = 0
        while i < track_length:
            n = int(rng.integers(40, 120))
            tt = np.arange(n) - rng.uniform(0.3, 0.7) * n
            dmin, speed = rng.uniform(0.2, 6.0), rng.uniform(0.05, 0.4)
            seg = slice(i, min(i + n, track_length))
            k_len = seg.stop - seg.start
            vd[seg] = np.hypot(dmin, speed * tt)[:k_len]
            land[seg] = rng.random() < 0.5
            i += n
        shore = 6.0 + 5.0 * np.sin(2 * np.pi * t / 450.0 + rng.uniform(0, 2 * np.pi))
        tracks_raw.append((vd, land, shore))
    vd_all = np.concatenate([r[0] for r in tracks_raw])
    land_all = np.concatenate([r[1] for r in tracks_raw])
    mask, scaling, _ = exposure_slots(vd_all, land_all, mask_km)
    u = np.column_stack([sc.values for sc in scaling])
    sc = scaling[1]
    beta = np.array([0.0, (sc.orig_max - sc.orig_min) / (1.0 / threshold_km - sc.orig_min)])
    start = 0
    t0 = pd.Timestamp("2019-08-01T00:00:00Z")
    for k, (vd, land, shore) in enumerate(tracks_raw):
        sl = slice(start, start + track_length)
        start += track_length
        tr, states, disturbed = simulate_thmm(theta, beta, u[sl], rng, mask[sl], f"whale{k + 1}", shore[:, None])
        step, angle = tr.observations["step"], tr.observations["angle"]
        lat = np.empty(track_length)
        lon = np.empty(track_length)
        lat[0], lon[0] = 72.5 + rng.normal(0, 0.2), -80.0 + rng.normal(0, 0.5)
        brg = rng.uniform(-np.pi, np.pi)
        for i in range(1, track_length):
            if i > 1:
                brg = brg + angle[i - 1]
            lat[i], lon[i] = destination(lat[i - 1], lon[i - 1], brg, step[i - 1])
        ts = t0 + pd.to_timedelta(np.arange(track_length) * cadence_minutes, unit="min")
        frames.append(pd.DataFrame({
            "track_id": f"whale{k + 1}",
            "timestamp": ts.strftime("%Y-%m-%dT%H:%M:%SZ"),
            "lat": lat, "lon": lon,
            "dist_shore_km": shore,
            "vessel_dist_km": vd,
            "land_between": land,
        }))
        states_all.append(states)
        disturbed_all.append(disturbed)
    truth = {"beta0": beta, "threshold_km": threshold_km, "threshold_exposure": 1.0 / threshold_km,
             "scaling": scaling, "states": states_all, "disturbed": disturbed_all, "theta": theta}
    return pd.concat(frames, ignore_index=True), truth

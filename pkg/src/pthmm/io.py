"""Telemetry ingestion, run configuration and result serialization."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import __version__
from .estimation import FitOptions, FitResult
from .exceptions import InputError
from .likelihood import Track, TrackData
from .model import Beta0, ModelSpec, RegimeCoefficients, StandardizedCovariate, ThetaParams, standardize

EARTH_RADIUS_KM = 6371.0088
SCHEMA_NAME = "pthmm.fit_result"
SCHEMA_VERSION = "1.0"

CANONICAL_COLUMNS = ["track_id", "timestamp", "step_km", "turn_rad", "max_depth_m", "dist_shore_km",
                     "vessel_dist_km", "land_between"]


# ---------------------------------------------------------------------------
# geometry


def haversine_km(lat1, lon1, lat2, lon2, radius: float = EARTH_RADIUS_KM):
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dp / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    return 2.0 * radius * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def initial_bearing(lat1, lon1, lat2, lon2):
    """Forward azimuth in radians, clockwise from north."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dl = np.radians(np.asarray(lon2) - np.asarray(lon1))
    y = np.sin(dl) * np.cos(p2)
    x = np.cos(p1) * np.sin(p2) - np.sin(p1) * np.cos(p2) * np.cos(dl)
    return np.arctan2(y, x)


def destination(lat, lon, bearing, dist_km, radius: float = EARTH_RADIUS_KM):
    """Point reached from (lat, lon) after ``dist_km`` along ``bearing`` (radians)."""
    p1, l1 = np.radians(lat), np.radians(lon)
    d = np.asarray(dist_km) / radius
    p2 = np.arcsin(np.sin(p1) * np.cos(d) + np.cos(p1) * np.sin(d) * np.cos(bearing))
    l2 = l1 + np.arctan2(np.sin(bearing) * np.sin(d) * np.cos(p1), np.cos(d) - np.sin(p1) * np.sin(p2))
    return np.degrees(p2), (np.degrees(l2) + 540.0) % 360.0 - 180.0


def steps_and_turns(lat, lon):
    """Step t joins fix t to fix t + 1; the turn at t is the change in bearing
    between steps t - 1 and t, reduced to (-pi, pi]. The first turn and the
    last step and turn are missing."""
    lat, lon = np.asarray(lat, float), np.asarray(lon, float)
    n = lat.size
    step = np.full(n, np.nan)
    turn = np.full(n, np.nan)
    if n >= 2:
        step[:-1] = haversine_km(lat[:-1], lon[:-1], lat[1:], lon[1:])
        brg = initial_bearing(lat[:-1], lon[:-1], lat[1:], lon[1:])
        d = brg[1:] - brg[:-1]
        d = np.mod(d + np.pi, 2 * np.pi) - np.pi
        d = np.where(d == -np.pi, np.pi, d)
        # bearing is undefined for a zero-length step
        bad = (step[:-1][1:] == 0) | (step[:-1][:-1] == 0)
        turn[1:-1] = np.where(bad, np.nan, d)
    return step, turn


# ---------------------------------------------------------------------------
# configuration


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(_Strict):
    n_states: int = Field(3, ge=2)
    streams: List[Tuple[str, str]] = [("step", "gamma"), ("angle", "vonmises")]
    tpm_covariates: List[str] = []
    share_across_regimes: List[bool] = []
    sharpness: float = Field(500.0, gt=0)

    @field_validator("streams")
    @classmethod
    def _families(cls, v):
        for name, fam in v:
            if fam not in ("gamma", "vonmises"):
                raise ValueError(f"unknown family {fam!r} for stream {name!r}")
        return v


class FitConfig(_Strict):
    n_starts: int = Field(50, ge=1)
    sharpness_schedule: List[float] = [5.0, 25.0, 100.0, 250.0, 500.0]
    target_b: Optional[float] = Field(None, gt=0)
    epsilon_sep: float = Field(0.15, gt=0, lt=1)
    separation_weight: float = Field(1e4, gt=0)
    qreml_tol: float = Field(1e-3, gt=0)
    qreml_max_iter: int = Field(50, ge=1)
    inner_opt_tol: float = Field(1e-6, gt=0)
    fd_step: float = Field(1e-5, gt=0)
    lambda_max: float = Field(1e8, gt=0)
    detection_tol: float = Field(1e-3, gt=0, lt=1)
    estimate_delta: bool = True
    perturb_sd: float = Field(0.2, ge=0)

    def options(self, seed: int) -> FitOptions:
        d = self.model_dump()
        d["sharpness_schedule"] = tuple(d["sharpness_schedule"])
        return FitOptions(seed=seed, **d)


class IngestConfig(_Strict):
    cadence_minutes: Optional[float] = Field(None, gt=0)
    cadence_tolerance_s: float = Field(1.0, ge=0)
    mask_km: float = Field(77.0, gt=0)
    step_stream: str = "step"
    angle_stream: Optional[str] = "angle"
    depth_stream: Optional[str] = None
    shore_covariate: Optional[str] = "dist_shore"


class ScenarioSpec(_Strict):
    id: str
    T: int = Field(ge=100)
    n_replicates: int = Field(50, ge=0)
    seed: int = 0


class BlrtSettings(_Strict):
    B: int = Field(100, ge=1)
    null_slots: Optional[List[int]] = None
    alpha: float = Field(0.05, gt=0, lt=1)
    bootstrap_starts: Optional[int] = Field(None, ge=1)


class RunConfig(_Strict):
    """Single JSON document driving every CLI command."""

    seed: int = 0
    model: ModelConfig = ModelConfig()
    fit: FitConfig = FitConfig()
    ingest: IngestConfig = IngestConfig()
    scenarios: List[ScenarioSpec] = []
    blrt: BlrtSettings = BlrtSettings()
    data_path: Optional[str] = None
    output_dir: Optional[str] = None


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.model_validate(raw)


def config_schema() -> dict:
    return RunConfig.model_json_schema()


# ---------------------------------------------------------------------------
# ingestion


@dataclass
class IngestResult:
    data: TrackData
    spec: ModelSpec
    frame: pd.DataFrame  # canonical per-row form
    diagnostics: list = field(default_factory=list)


def _to_bool(col: pd.Series) -> pd.Series:
    if col.dtype == bool:
        return col
    m = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}
    return col.map(lambda v: m.get(str(v).strip().lower()) if not pd.isna(v) else None)


def read_telemetry(path_or_frame) -> pd.DataFrame:
    if isinstance(path_or_frame, pd.DataFrame):
        return path_or_frame.copy()
    try:
        return pd.read_csv(path_or_frame, encoding="utf-8", dtype={"track_id": str},
                           float_precision="round_trip")
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise InputError(f"cannot parse telemetry CSV: {exc}") from exc


def canonicalize(df: pd.DataFrame, cfg: IngestConfig = IngestConfig()):
    """Validate rows and derive steps and turns; returns ``(frame, diagnostics)``.

    Rows failing validation are listed in the diagnostics; any such row
    rejects the input.
    """
    diags = []
    for col in ("track_id", "timestamp", "dist_shore_km"):
        if col not in df.columns:
            raise InputError(f"missing required column {col!r}")
    have_pos = {"lat", "lon"} <= set(df.columns)
    if not have_pos and "step_km" not in df.columns:
        raise InputError("need lat/lon or step_km")
    df = df.copy()
    df["track_id"] = df["track_id"].astype(str)
    df["_row"] = np.arange(len(df)) + 2  # header is line 1
    ts = pd.to_datetime(df["timestamp"], utc=True, errors="coerce")
    for r in df.loc[ts.isna(), "_row"]:
        diags.append({"row": int(r), "problem": "unparseable timestamp"})
    df["timestamp"] = ts
    for col in ("dist_shore_km", "vessel_dist_km", "step_km", "max_depth_m"):
        if col in df.columns:
            df[col] = pd.to_numeric(df[col], errors="coerce")
            bad = df[col] < 0
            for r in df.loc[bad, "_row"]:
                diags.append({"row": int(r), "problem": f"negative {col}"})
    if "vessel_dist_km" in df.columns:
        for r in df.loc[df["vessel_dist_km"] == 0, "_row"]:
            diags.append({"row": int(r), "problem": "vessel_dist_km must be positive"})
    if df["dist_shore_km"].isna().any():
        for r in df.loc[df["dist_shore_km"].isna(), "_row"]:
            diags.append({"row": int(r), "problem": "missing dist_shore_km"})
    if "land_between" in df.columns:
        df["land_between"] = _to_bool(df["land_between"])

    out = []
    for tid, g in df.groupby("track_id", sort=False):
        t = g["timestamp"]
        if t.isna().any():
            continue
        dt = t.diff().dt.total_seconds().to_numpy()[1:]
        for r, d in zip(g["_row"].to_numpy()[1:], dt):
            if not d > 0:
                diags.append({"row": int(r), "track_id": tid, "problem": "timestamps not strictly increasing"})
        if len(g) < 2:
            diags.append({"row": int(g["_row"].iloc[0]), "track_id": tid, "problem": "track shorter than 2 rows"})
            continue
        cadence = cfg.cadence_minutes * 60.0 if cfg.cadence_minutes else float(np.median(dt))
        off = np.abs(dt - cadence) > cfg.cadence_tolerance_s
        for r, d in zip(g["_row"].to_numpy()[1:][off], dt[off]):
            if d > 0:
                diags.append({"row": int(r), "track_id": tid,
                              "problem": f"irregular cadence ({d:.0f} s, expected {cadence:.0f} s)"})
        g = g.copy()
        if have_pos and not ("step_km" in g.columns and g["step_km"].notna().any()):
            step, turn = steps_and_turns(g["lat"].to_numpy(float), g["lon"].to_numpy(float))
            g["step_km"] = step
            g["turn_rad"] = turn
        out.append(g)
    if diags:
        raise InputError("telemetry rejected", diags)
    frame = pd.concat(out, ignore_index=True)
    for col in CANONICAL_COLUMNS:
        if col not in frame.columns:
            frame[col] = np.nan if col != "land_between" else None
    frame = frame[CANONICAL_COLUMNS].copy()
    frame["timestamp"] = frame["timestamp"].dt.strftime("%Y-%m-%dT%H:%M:%SZ")
    if "turn_rad" in frame:
        ang = frame["turn_rad"].to_numpy(float)
        ok = ~np.isnan(ang)
        red = np.mod(ang[ok] + np.pi, 2 * np.pi) - np.pi
        ang[ok] = np.where(red == -np.pi, np.pi, red)
        frame["turn_rad"] = ang
    return frame, diags


def exposure_slots(vessel_dist_km, land_between=None, mask_km: float = 77.0):
    """Baseline mask, per-slot scalings and slot names from vessel distances.

    Exposure is 1 / distance. Masked steps (no vessel, or farther than
    ``mask_km``) get exposure 0 and do not enter the min/max.
    """
    vd = np.asarray(vessel_dist_km, dtype=float)
    mask = np.isnan(vd) | (vd > mask_km)
    with np.errstate(divide="ignore", invalid="ignore"):
        expo = np.where(mask, 0.0, 1.0 / vd)
    land = pd.Series(land_between) if land_between is not None else None
    if land is not None and land.notna().any():
        flag = land.fillna(False).to_numpy(bool)
        raw = np.column_stack([np.where(flag, expo, 0.0), np.where(flag, 0.0, expo)])
        slots = ("exposure_land", "exposure_noland")
    else:
        raw = expo[:, None]
        slots = ("exposure",)
    scaling = []
    for i in range(raw.shape[1]):
        if mask.all():
            # nothing can be disturbed; keep a placeholder scaling
            scaling.append(StandardizedCovariate(np.zeros(vd.size), 0.0, 0.0))
            continue
        sc = standardize(raw[:, i], forced_zero_mask=mask)
        sc.values = np.where(mask, 0.0, sc.values)
        scaling.append(sc)
    return mask, scaling, slots


def ingest_tracks(source, config: IngestConfig = IngestConfig(), model: Optional[ModelConfig] = None) -> IngestResult:
    """Telemetry CSV (path or frame) to :class:`TrackData`.

    Exposure is 1 / vessel_dist_km, split into a land slot and a no-land slot
    when ``land_between`` is present. Steps farther than ``mask_km`` from a
    vessel, or with no vessel, are forced to the baseline regime and their
    exposure set to 0. Each slot is scaled over its unmasked entries.
    """
    frame, diags = canonicalize(read_telemetry(source), config)
    mask, scaling, slots = exposure_slots(frame["vessel_dist_km"].to_numpy(float),
                                          frame["land_between"], config.mask_km)
    u = np.column_stack([sc.values for sc in scaling])

    streams = [(config.step_stream, "gamma")]
    obs_cols = {config.step_stream: "step_km"}
    if config.angle_stream:
        streams.append((config.angle_stream, "vonmises"))
        obs_cols[config.angle_stream] = "turn_rad"
    if config.depth_stream:
        streams.append((config.depth_stream, "gamma"))
        obs_cols[config.depth_stream] = "max_depth_m"
    obs_all = {}
    for name, col in obs_cols.items():
        x = frame[col].to_numpy(float).copy()
        if col in ("step_km", "max_depth_m"):
            x[x <= 0] = np.nan  # gamma support
        obs_all[name] = x
    tpm_names = [config.shore_covariate] if config.shore_covariate else []
    shore = frame["dist_shore_km"].to_numpy(float)
    tracks = []
    ids = frame["track_id"].to_numpy()
    bounds = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1], True])
    for s, e in zip(bounds[:-1], bounds[1:]):
        obs = {k: v[s:e] for k, v in obs_all.items()}
        cov = shore[s:e, None] if tpm_names else None
        tracks.append(Track(obs, cov, u[s:e], mask[s:e], str(ids[s])))

    if model is not None:
        shared = list(model.share_across_regimes) or [True] * len(tpm_names)
        sharp = model.sharpness
        n_states = model.n_states
    else:
        shared, sharp, n_states = [True] * len(tpm_names), 500.0, 3
    spec = ModelSpec(n_states, tuple(streams), tuple(tpm_names), tuple(shared), slots, sharp)
    return IngestResult(TrackData(tracks, scaling), spec, frame, diags)


def write_canonical(frame: pd.DataFrame, path) -> None:
    frame.to_csv(path, index=False, float_format="%.17g")


# ---------------------------------------------------------------------------
# result serialization


def _num(x):
    if x is None:
        return None
    x = float(x)
    return None if not math.isfinite(x) else x


def _den(x):
    return float("nan") if x is None else float(x)


def _spec_dict(spec: ModelSpec) -> dict:
    return {"n_states": spec.n_states, "streams": [list(s) for s in spec.streams],
            "tpm_covariates": list(spec.tpm_covariates), "share_across_regimes": list(spec.share_across_regimes),
            "threshold_covariates": list(spec.threshold_covariates), "sharpness_target": spec.sharpness_target}


def _options_dict(opt: FitOptions) -> dict:
    d = asdict(opt)
    d["sharpness_schedule"] = list(d["sharpness_schedule"])
    d["hessian_jitter"] = list(d["hessian_jitter"])
    return d


def result_to_dict(res: FitResult, provenance: Optional[dict] = None) -> dict:
    th = res.theta_hat
    spec = res.spec
    names = list(spec.threshold_covariates) if spec is not None else [f"u{i}" for i in range(len(res.beta0_hat))]
    scaling = []
    for i, sc in enumerate(res.scaling):
        scaling.append({"slot": names[i], "orig_min": sc.orig_min, "orig_max": sc.orig_max})
    prov = {"artifact_version": __version__, "seed": res.options.seed if res.options else None,
            "options": _options_dict(res.options) if res.options else None,
            "spec": _spec_dict(spec) if spec else None}
    prov.update(provenance or {})
    return {
        "schema": SCHEMA_NAME,
        "version": SCHEMA_VERSION,
        "provenance": prov,
        "lambda_hat": res.lambda_hat,
        "capped": bool(res.capped),
        "converged": bool(res.converged),
        "qreml_iterations": int(res.qreml_iterations),
        "lambda_history": [float(x) for x in res.lambda_history],
        "loglik": _num(res.loglik),
        "marginal_loglik": _num(res.marginal_loglik),
        "hessian_logdet": _num(res.hessian_logdet),
        "hessian_jitter": _num(res.hessian_jitter),
        "beta0": {"slots": names, "log_values": [_num(v) if np.isfinite(v) else None for v in res.beta0_hat.log_values],
                  "values": [float(v) for v in res.beta0_hat.values]},
        "thresholds_original": [None if t is None else float(t) for t in res.thresholds_original],
        "disturbance_detected": [bool(d) for d in res.disturbance_detected],
        "scaling": scaling,
        "theta": {
            "state_params": {k: {"family": th.families[k], "values": v.tolist()} for k, v in th.state_params.items()},
            "coeffs_B": th.coeffs.B.tolist(),
            "coeffs_D": None if th.coeffs.D is None else th.coeffs.D.tolist(),
            "delta_B": th.delta_B.tolist(),
            "delta_D": None if th.delta_D is None else th.delta_D.tolist(),
        },
        "nu_series": [float(x) for x in res.nu_series],
    }


def dumps_result(res: FitResult, provenance: Optional[dict] = None) -> str:
    return json.dumps(result_to_dict(res, provenance), indent=2, allow_nan=False) + "\n"


def serialize_result(res: FitResult, path=None, provenance: Optional[dict] = None) -> str:
    text = dumps_result(res, provenance)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def result_from_dict(d: dict) -> FitResult:
    if d.get("schema") != SCHEMA_NAME:
        raise InputError(f"not a {SCHEMA_NAME} document")
    if str(d.get("version", "")).split(".")[0] != SCHEMA_VERSION.split(".")[0]:
        raise InputError(f"unsupported schema version {d.get('version')}")
    t = d["theta"]
    th = ThetaParams(
        {k: np.array(v["values"]) for k, v in t["state_params"].items()},
        RegimeCoefficients(np.array(t["coeffs_B"]), None if t["coeffs_D"] is None else np.array(t["coeffs_D"])),
        np.array(t["delta_B"]),
        None if t["delta_D"] is None else np.array(t["delta_D"]),
        {k: v["family"] for k, v in t["state_params"].items()},
    )
    logs = [(-np.inf if v is None else v) for v in d["beta0"]["log_values"]]
    prov = d.get("provenance", {})
    spec = None
    if prov.get("spec"):
        s = prov["spec"]
        spec = ModelSpec(s["n_states"], tuple(tuple(x) for x in s["streams"]), tuple(s["tpm_covariates"]),
                         tuple(s["share_across_regimes"]), tuple(s["threshold_covariates"]), s["sharpness_target"])
    options = None
    if prov.get("options"):
        o = dict(prov["options"])
        o["sharpness_schedule"] = tuple(o["sharpness_schedule"])
        o["hessian_jitter"] = tuple(o["hessian_jitter"])
        options = FitOptions(**o)
    scaling = [StandardizedCovariate(np.array([]), s["orig_min"], s["orig_max"]) for s in d["scaling"]]
    return FitResult(
        theta_hat=th,
        beta0_hat=Beta0(np.array(logs, dtype=float)),
        lambda_hat=float(d["lambda_hat"]),
        loglik=_den(d["loglik"]),
        marginal_loglik=_den(d["marginal_loglik"]),
        nu_series=np.array(d["nu_series"], dtype=float),
        thresholds_original=[None if x is None else float(x) for x in d["thresholds_original"]],
        disturbance_detected=[bool(x) for x in d["disturbance_detected"]],
        qreml_iterations=int(d["qreml_iterations"]),
        converged=bool(d["converged"]),
        hessian_logdet=_den(d["hessian_logdet"]),
        capped=bool(d["capped"]),
        hessian_jitter=_den(d["hessian_jitter"]),
        lambda_history=[float(x) for x in d["lambda_history"]],
        scaling=scaling,
        spec=spec,
        options=options,
    )


def read_result(path_or_text) -> FitResult:
    text = path_or_text
    if not str(path_or_text).lstrip().startswith("{"):
        try:
            text = Path(path_or_text).read_text(encoding="utf-8")
        except OSError as exc:
            raise InputError(f"cannot read result {path_or_text}: {exc}") from exc
    try:
        return result_from_dict(json.loads(text))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed result document: {exc}") from exc


# ---------------------------------------------------------------------------
# tabular outputs


def nu_frame(res: FitResult, data: TrackData, paths=None) -> pd.DataFrame:
    """Per-step table with columns t, track_id, nu_hat, state_viterbi (1-based t per track)."""
    rows_t, rows_id = [], []
    for tr in data.tracks:
        rows_t.append(np.arange(1, len(tr) + 1))
        rows_id.append(np.full(len(tr), tr.track_id, dtype=object))
    out = pd.DataFrame({"t": np.concatenate(rows_t), "track_id": np.concatenate(rows_id),
                        "nu_hat": np.asarray(res.nu_series, dtype=float)})
    out["state_viterbi"] = np.concatenate(paths) + 1 if paths is not None else pd.NA
    return out


def thresholds_frame(res: FitResult) -> pd.DataFrame:
    names = list(res.spec.threshold_covariates) if res.spec else [f"u{i}" for i in range(len(res.beta0_hat))]
    rows = []
    for i, name in enumerate(names):
        thr = res.thresholds_original[i]
        rows.append({"slot": name, "beta0_hat": float(res.beta0_hat.values[i]), "detected": bool(res.disturbance_detected[i]),
                     "threshold_original": thr,
                     "threshold_inverse": (1.0 / thr) if (thr is not None and thr > 0) else None,
                     "orig_min": res.scaling[i].orig_min if i < len(res.scaling) else None,
                     "orig_max": res.scaling[i].orig_max if i < len(res.scaling) else None})
    return pd.DataFrame(rows)

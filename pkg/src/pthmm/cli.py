"""Command-line interface: simulate, fit, blrt, decode, report."""
from __future__ import annotations

import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np
import pandas as pd
from pydantic import ValidationError

from . import __version__
from .blrt import BlrtConfig, blrt as run_blrt
from .estimation import qreml_loop
from .exceptions import THMMError
from .io import (config_schema, dumps_result, ingest_tracks, load_config, nu_frame, read_result, thresholds_frame,
                 write_canonical)
from .likelihood import state_occupancy, viterbi
from .simulation import ScenarioConfig, metrics_frame, report_frame, run_scenario, scenario_dataset

log = logging.getLogger("pthmm")


def _fail(kind: str, message: str, diagnostics=None, code: int = 2):
    doc = {"error": kind, "message": message}
    if diagnostics:
        doc["diagnostics"] = diagnostics
    click.echo(json.dumps(doc), err=True)
    sys.exit(code)


def _guard(fn):
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.UsageError as exc:
            _fail("UsageError", exc.format_message())
        except ValidationError as exc:
            _fail("ConfigError", "configuration failed validation",
                  [{"loc": list(e["loc"]), "msg": e["msg"]} for e in exc.errors()])
        except THMMError as exc:
            _fail(type(exc).__name__, str(exc), getattr(exc, "diagnostics", None))
        except OSError as exc:
            _fail("IOError", str(exc))

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _seed(cfg, cli_seed):
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get("THMM_SEED")
    return int(env) if env not in (None, "") else cfg.seed


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("THMM_THREADS", "1")))
    except ValueError:
        return 1


def _outdir(path, cfg) -> Path:
    out = Path(path or cfg.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _options(cfg, seed, starts):
    opts = cfg.fit.options(seed)
    if starts is not None:
        opts.n_starts = int(starts)
    return opts


def _dump_json(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, allow_nan=False, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(x):
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serializable: {type(x)}")


def _clean(x):
    # NaN is not valid JSON; write null instead
    if isinstance(x, float) and not np.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


@click.group()
@click.version_option(__version__)
@click.option("--log-level", default="WARNING", show_default=True)
def main(log_level):
    """Lasso-penalized threshold HMMs."""
    logging.basicConfig(level=log_level.upper(), format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--scenario", type=click.Choice(["1a", "1b", "2a", "2b", "2c"]), default=None)
@click.option("--T", "T", type=int, default=None)
@click.option("--reps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--starts", type=int, default=None, help="Override the number of random starts.")
@click.option("--out", type=click.Path(), default=None)
@click.option("--write-data", is_flag=True, help="Also write each simulated dataset as CSV.")
@_guard
def simulate(config_path, scenario, T, reps, seed, starts, out, write_data):
    """Simulate scenario replicates, fit each one, write metrics."""
    cfg = load_config(config_path)
    seed = _seed(cfg, seed)
    if scenario is not None:
        if T is None:
            raise click.UsageError("--T is required with --scenario")
        runs = [ScenarioConfig(scenario, T, 50 if reps is None else reps, seed=seed)]
    else:
        runs = [ScenarioConfig(s.id, s.T, s.n_replicates if reps is None else reps, seed=s.seed)
                for s in cfg.scenarios]
        if not runs:
            raise click.UsageError("no scenario given on the command line or in the config")
    outdir = _outdir(out, cfg)
    opts = _options(cfg, seed, starts)
    for sc in runs:
        stem = f"scenario_{sc.id}_T{sc.T}"
        if write_data:
            for r in range(sc.n_replicates):
                data, _, states = scenario_dataset(sc, r)
                st = data.stacked()
                pd.DataFrame({"t": np.arange(1, data.T + 1), "step": st.obs["step"], "state": states + 1,
                              **{f"u{i + 1}": st.u[:, i] for i in range(st.u.shape[1])}}).to_csv(
                    outdir / f"{stem}_rep{r}.csv", index=False, float_format="%.17g")
        m = run_scenario(sc, opts, workers=_workers())
        frame = metrics_frame(m)
        frame.to_csv(outdir / f"{stem}_metrics.csv", index=False, float_format="%.17g")
        if len(frame):
            report_frame([frame]).to_csv(outdir / f"{stem}_report.csv", index=False, float_format="%.6g")
        summary = {k: v for k, v in m.to_dict().items() if k not in ("records", "median_seconds")}
        summary.update({"artifact_version": __version__, "seed": sc.seed, "n_starts": opts.n_starts})
        _dump_json(_clean(summary), outdir / f"{stem}_summary.json")
        click.echo(f"{stem}: n_ok={m.n_ok}/{m.n_replicates} fpr={m.false_positive_rate} power={m.power} "
                   f"bias={m.beta0_bias} sd={m.beta0_sd}")


def _ingest(cfg, data_path):
    path = data_path or cfg.data_path
    if path is None:
        raise click.UsageError("no data file given (--data or data_path in the config)")
    return ingest_tracks(path, cfg.ingest, cfg.model)


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--data", "data_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--starts", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@_guard
def fit(config_path, data_path, seed, starts, out):
    """Fit the penalized THMM to telemetry and write the result documents."""
    cfg = load_config(config_path)
    seed = _seed(cfg, seed)
    ing = _ingest(cfg, data_path)
    opts = _options(cfg, seed, starts)
    res = qreml_loop(ing.data, ing.spec, opts)
    outdir = _outdir(out, cfg)
    (outdir / "fit_result.json").write_text(dumps_result(res, {"data": str(data_path or cfg.data_path)}),
                                            encoding="utf-8")
    paths = viterbi(res.theta_hat, res.beta0_hat, ing.data, ing.spec.sharpness_target)
    nu_frame(res, ing.data, paths).to_csv(outdir / "nu.csv", index=False, float_format="%.10g")
    thresholds_frame(res).to_csv(outdir / "thresholds.csv", index=False, float_format="%.10g")
    write_canonical(ing.frame, outdir / "canonical.csv")
    click.echo(json.dumps({"lambda_hat": res.lambda_hat, "capped": res.capped,
                           "thresholds_original": res.thresholds_original,
                           "disturbance_detected": res.disturbance_detected}))


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--data", "data_path", type=click.Path(), default=None)
@click.option("--B", "B", type=int, default=None)
@click.option("--null-slots", default=None, help="Comma-separated 0-based slots fixed at zero (default: all).")
@click.option("--seed", type=int, default=None)
@click.option("--starts", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@_guard
def blrt(config_path, data_path, B, null_slots, seed, starts, out):
    """Bootstrap likelihood-ratio test of the disturbed component."""
    cfg = load_config(config_path)
    seed = _seed(cfg, seed)
    ing = _ingest(cfg, data_path)
    b = cfg.blrt
    slots = b.null_slots if null_slots is None else [int(s) for s in null_slots.split(",") if s.strip()]
    bc = BlrtConfig(B or b.B, None if slots is None else tuple(slots), b.alpha, seed, b.bootstrap_starts)
    res = run_blrt(ing.data, ing.spec, bc, _options(cfg, seed, starts), workers=_workers())
    outdir = _outdir(out, cfg)
    doc = _clean(asdict(res))
    doc.update({"schema": "pthmm.blrt_result", "version": "1.0", "artifact_version": __version__, "seed": seed,
                "B": bc.B, "alpha": bc.alpha})
    _dump_json(doc, outdir / "blrt_result.json")
    click.echo(json.dumps({"observed_lr": res.observed_lr, "p_value": res.p_value, "n_failed": res.n_failed}))


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--result", "result_path", type=click.Path(exists=True), required=True)
@click.option("--data", "data_path", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), default=None)
@_guard
def decode(config_path, result_path, data_path, out):
    """Viterbi states and occupancy under a fitted result."""
    cfg = load_config(config_path)
    res = read_result(result_path)
    ing = _ingest(cfg, data_path)
    b = res.spec.sharpness_target if res.spec else 500.0
    paths = viterbi(res.theta_hat, res.beta0_hat, ing.data, b)
    outdir = _outdir(out, cfg)
    nu_frame(res, ing.data, paths).to_csv(outdir / "states.csv", index=False, float_format="%.10g")
    occ = state_occupancy(paths, res.theta_hat.n_states)
    _dump_json({"occupancy": [float(x) for x in occ],
                "per_track": {tr.track_id: [float(x) for x in state_occupancy([p], res.theta_hat.n_states)]
                              for tr, p in zip(ing.data.tracks, paths)}}, outdir / "occupancy.json")
    click.echo(json.dumps({"occupancy": [round(float(x), 4) for x in occ]}))


@main.command()
@click.argument("metrics", nargs=-1, type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), default=None, help="Summary CSV path (default: stdout).")
@_guard
def report(metrics, out):
    """Aggregate replicate metrics CSVs into a summary table."""
    table = report_frame(pd.read_csv(p, float_precision="round_trip") for p in metrics)
    if out:
        table.to_csv(out, index=False, float_format="%.6g")
    else:
        click.echo(table.to_csv(index=False, float_format="%.6g"), nl=False)


@main.command("config-schema")
def config_schema_cmd():
    """Print the JSON schema of the run configuration."""
    click.echo(json.dumps(config_schema(), indent=2))


if __name__ == "__main__":
    main()

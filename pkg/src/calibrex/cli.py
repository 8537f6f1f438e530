"""Command-line entry point.

    calibrex calibrate --config run.json --out results/ [--seed N] [--force] ...
    calibrex subspace  --config run.json --out results/
    calibrex compare   --config run.json --out results/ --seeds 0,1,2 --dr original,as-static

Exit codes: 0 success, 1 unexpected error, 2 configuration error, 3 the
simulator failed too often during the initial design.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import statistics
import sys
from pathlib import Path

import numpy as np

from calibrex import __version__
from calibrex import active_subspace as asub
from calibrex import orchestrator as orch
from calibrex import rng as rngs
from calibrex import sampling
from calibrex.errors import CalibrexError, InvalidArgumentError, SimulatorAbort

log = logging.getLogger("calibrex")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_ABORT = 3

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

TRACE_HEADER_FIXED = ["iteration", "point_id"]
TRACE_HEADER_TAIL = ["latent", "loss", "wall_time", "status"]
CURVE_HEADER = ["iteration", "min_loss"]
EIGVALS_HEADER = ["index", "eigenvalue"]
COMPARE_HEADER = ["config", "seed", "iteration", "min_loss"]
SUMMARY_HEADER = ["config", "seeds", "median_final_min_loss", "min_final_min_loss", "max_final_min_loss"]


class ConfigError(Exception):
    """Bad command line or configuration file."""


# --- configuration ----------------------------------------------------------


def load_config(path, overrides: dict | None = None) -> orch.CalibrationConfig:
    """Read a JSON configuration file and apply command-line overrides."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: the top level must be a JSON object")
    sim = raw.get("simulator")
    if isinstance(sim, dict) and isinstance(sim.get("observed"), str):
        # a path to a whitespace/comma separated series, relative to the config file
        obs_path = (path.parent / sim["observed"]).resolve()
        try:
            text = obs_path.read_text().replace(",", " ")
            sim = dict(sim, observed=np.loadtxt(io.StringIO(text)).ravel().tolist())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"could not read observed series {obs_path}: {exc}") from None
        raw = dict(raw, simulator=sim)
    raw.setdefault("name", path.stem)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "acquisition":
            raw["acquisition"] = dict(raw.get("acquisition", {}), family=value)
        else:
            raw[key] = value
    try:
        return orch.CalibrationConfig.from_dict(raw)
    except (InvalidArgumentError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _overrides(args) -> dict:
    return {
        "seed": args.seed,
        "trials": args.trials,
        "batch_size": args.batch,
        "parallelism": args.parallelism,
        "dr_mode": getattr(args, "dr", None),
        "mean_mode": getattr(args, "mean", None),
        "acquisition": args.acq,
        "active_dim": args.active_dim,
        "latent_dim": getattr(args, "latent_dim", None),
    }


# --- output helpers ---------------------------------------------------------


def _fmt(x) -> str:
    return repr(float(x))


def _write_atomic(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def trace_rows(report: orch.CalibrationReport):
    """One row per issued simulation (successful or failed), ordered by point id."""
    records = sorted(report.records + report.failures, key=lambda r: int(r.id))
    for r in records:
        latent = "" if r.latent is None else ";".join(_fmt(v) for v in np.ravel(r.latent))
        yield (
            [r.iteration, r.id]
            + [_fmt(v) for v in r.theta]
            + [latent, "" if not r.ok else _fmt(r.loss), f"{r.wall_time:.6f}", "ok" if r.ok else "failed"]
        )


def trace_header(d: int) -> list:
    return TRACE_HEADER_FIXED + [f"theta_{i + 1}" for i in range(d)] + TRACE_HEADER_TAIL


def curve_rows(curve):
    return [[k, _fmt(v)] for k, v in enumerate(curve)]


def write_report(report: orch.CalibrationReport, out: Path):
    d = report.config.simulator.dim
    _write_atomic(out / "trace.csv", _csv_text(trace_header(d), trace_rows(report)))
    _write_atomic(out / "curve.csv", _csv_text(CURVE_HEADER, curve_rows(report.curve)))
    _write_atomic(out / "report.json", json.dumps(report.summary(), indent=2) + "\n")


def _save_state(state: orch.CalibrationState, out: Path):
    _write_atomic(out / "state.json", json.dumps(state.to_dict()) + "\n")


def _prepare_out(out: Path, config: orch.CalibrationConfig, force: bool):
    """Create the output directory, or decide whether an existing run may be resumed.

    Returns the state to resume from, or None for a fresh start.
    """
    out.mkdir(parents=True, exist_ok=True)
    state_path = out / "state.json"
    config_path = out / "config.json"
    resolved = json.dumps(config.to_dict(), indent=2) + "\n"
    if state_path.exists() and not force:
        state = orch.CalibrationState.from_dict(json.loads(state_path.read_text()))
        if state.finished:
            raise ConfigError(f"{out} holds a completed run; pass --force to overwrite it")
        if not config_path.exists() or config_path.read_text() != resolved:
            raise ConfigError(f"{out} holds an unfinished run with a different configuration; "
                              "pass --force to start over")
        log.info("resuming run in %s at iteration %d", out, state.iteration)
        return state
    for name in ("state.json", "trace.csv", "curve.csv", "report.json"):
        (out / name).unlink(missing_ok=True)
    _write_atomic(config_path, resolved)
    return None


# --- commands ---------------------------------------------------------------


def cmd_calibrate(args) -> int:
    config = load_config(args.config, _overrides(args))
    out = Path(args.out)
    state = _prepare_out(out, config, args.force)
    report = orch.run(
        config, state=state, stop_after=args.stop_after,
        checkpoint=lambda st: _save_state(st, out),
    )
    write_report(report, out)
    best = report.best
    print(f"best loss {best.loss:.6g} at point {best.id} (iteration {best.iteration})")
    print("theta " + " ".join(f"{v:.6g}" for v in best.theta))
    return EXIT_OK


def cmd_subspace(args) -> int:
    config = load_config(args.config, _overrides(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    domain = config.simulator.domain
    if domain.dim == 1:
        vals, active_dim, W = np.array([1.0]), 1, np.ones((1, 1))
        X = np.empty((0, 1))
    else:
        design = sampling.lhs(domain, config.design_size, rngs.stream(config.seed, rngs.DESIGN))
        recs = [orch.EvaluationRecord(str(i), 0, th, None) for i, th in enumerate(design)]
        orch.evaluate_batch(config.simulator, recs, config.parallelism, config.simulator.observed, config.seed)
        ok = [r for r in recs if r.ok]
        if len(ok) < domain.dim + 2:
            raise SimulatorAbort(f"only {len(ok)} of {len(recs)} design runs succeeded")
        X = sampling.normalize(domain, np.array([r.theta for r in ok]))
        sub = asub.find_active_subspace(X, [r.loss for r in ok], config.k_neighbors, config.active_dim)
        vals, active_dim, W = sub.eigvals, sub.active_dim, sub.eigvecs
    _write_atomic(out / "eigvals.csv", _csv_text(EIGVALS_HEADER, [[i, _fmt(v)] for i, v in asub.spectrum_rows(vals)]))
    doc = {
        "active_dim": int(active_dim),
        "eigenvalues": np.asarray(vals).tolist(),
        "eigenvectors": np.asarray(W).tolist(),
        "samples": int(X.shape[0]),
        "config": config.to_dict(),
    }
    _write_atomic(out / "subspace.json", json.dumps(doc, indent=2) + "\n")
    print(f"active_dim {active_dim}")
    return EXIT_OK


def _parse_list(text, cast=str) -> list:
    return [cast(t.strip()) for t in text.split(",") if t.strip()]


def compare_variants(args) -> list:
    """``(name, config)`` for every config file x dr mode x mean mode combination."""
    drs = _parse_list(args.dr) if args.dr else [None]
    means = _parse_list(args.mean) if args.mean else [None]
    variants = []
    for path in args.config:
        for dr in drs:
            for mean in means:
                ov = _overrides(args)
                ov.update(dr_mode=dr, mean_mode=mean, seed=None)
                cfg = load_config(path, ov)
                parts = [cfg.name] if len(args.config) > 1 or (dr is None and mean is None) else []
                parts += [p for p in (dr, mean and f"mean={mean}") if p]
                variants.append(("/".join(parts), cfg))
    names = [n for n, _ in variants]
    if len(set(names)) != len(names):
        raise ConfigError("compare configurations need distinct names")
    return variants


def summary_rows(long_rows) -> list:
    """Per-config statistics of the final min loss, from (config, seed, iteration, min_loss) rows."""
    finals = {}
    for name, seed, it, value in long_rows:
        key = (name, seed)
        if key not in finals or it >= finals[key][0]:
            finals[key] = (it, float(value))
    by_cfg = {}
    for (name, _), (_, v) in finals.items():
        by_cfg.setdefault(name, []).append(v)
    return [
        [name, len(v), _fmt(statistics.median(v)), _fmt(min(v)), _fmt(max(v))]
        for name, v in by_cfg.items()
    ]


def cmd_compare(args) -> int:
    seeds = _parse_list(args.seeds, int) if args.seeds else [0]
    variants = compare_variants(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    target = out / "compare.csv"
    if target.exists() and not args.force:
        raise ConfigError(f"{target} exists; pass --force to overwrite it")
    rows = []
    for name, cfg in variants:
        for seed in seeds:
            log.info("running %s with seed %d", name, seed)
            report = orch.run(cfg.replace(seed=seed))
            rows += [[name, seed, k, v] for k, v in enumerate(report.curve)]
    _write_atomic(target, _csv_text(COMPARE_HEADER, [[n, s, k, _fmt(v)] for n, s, k, v in rows]))
    summary = summary_rows(rows)
    _write_atomic(out / "summary.csv", _csv_text(SUMMARY_HEADER, summary))
    width = max(len(r[0]) for r in summary)
    for name, n, med, _, _ in summary:
        print(f"{name:<{width}}  median final min loss {float(med):.6g}  ({n} seeds)")
    return EXIT_OK


# --- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="calibrex", description="Calibrate black-box simulators by batch Bayesian optimisation.")
    p.add_argument("--version", action="version", version=f"calibrex {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, multi_config=False):
        if multi_config:
            sp.add_argument("--config", required=True, action="append", metavar="PATH",
                            help="JSON configuration (repeat to compare several)")
        else:
            sp.add_argument("--config", required=True, metavar="PATH", help="JSON configuration file")
        sp.add_argument("--out", required=True, metavar="DIR", help="output directory")
        sp.add_argument("--trials", type=int)
        sp.add_argument("--batch", type=int)
        sp.add_argument("--parallelism", type=int)
        sp.add_argument("--acq", choices=["pi", "ei", "ucb"])
        sp.add_argument("--active-dim", type=int, help="override the detected active dimension")
        sp.add_argument("--force", action="store_true", help="overwrite a completed run")

    c = sub.add_parser("calibrate", help="run one calibration")
    common(c)
    c.add_argument("--seed", type=int)
    c.add_argument("--dr", choices=[m.value for m in orch.DrMode])
    c.add_argument("--mean", choices=[m.value for m in orch.MeanMode])
    c.add_argument("--latent-dim", type=int)
    c.add_argument("--stop-after", type=int, metavar="K", help="checkpoint and stop after iteration K")
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("subspace", help="design plus active-subspace analysis only")
    common(s)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_subspace, dr=None, mean=None)

    m = sub.add_parser("compare", help="run several configurations over shared seeds")
    common(m, multi_config=True)
    m.add_argument("--seeds", help="comma-separated seed list (default 0)")
    m.add_argument("--dr", help="comma-separated dimension-reduction modes")
    m.add_argument("--mean", help="comma-separated mean modes")
    m.add_argument("--latent-dim", type=int)
    m.set_defaults(func=cmd_compare, seed=None)
    return p


def _setup_logging():
    name = os.environ.get("CALIBREX_LOG", "warn").strip().lower()
    level = LOG_LEVELS.get(name)
    logging.basicConfig(level=level or logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if level is None:
        log.warning("ignoring unknown CALIBREX_LOG value %r", name)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, InvalidArgumentError) as exc:
        print(f"calibrex: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulatorAbort as exc:
        print(f"calibrex: simulator abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except CalibrexError as exc:
        print(f"calibrex: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: ``rgbm <subcommand> ...``.

Failures print one JSON line ``{"error": <code>, "message": <text>}`` to
stderr and exit with status 2 (bad input, infeasible request) or 1
(unexpected failure).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .calibration import (
    CalibrationConfig,
    TauSeries,
    fit_mu,
    fit_tau_series,
    init_lognormal,
    sigma_by_year,
    smooth,
    validate_forward,
)
from .ensemble import Ensemble, ModelParams, StepConfig, simulate_years
from .equilibrium import equilibration_time, tau_eqm, tau_eqm_table
from .errors import DataError, RgbmError, RgbmWarning, UsageError
from .inequality import ShareTarget, gini, top_share
from .io import (
    DatasetPaths,
    RunManifest,
    atomic_write_text,
    dump_manifest,
    load_daily_closes,
    load_manifest,
    load_wealth_per_capita,
    read_tau_series,
    write_snapshot,
    write_table,
    write_tau_series,
    write_validation,
)

log = logging.getLogger("rgbm")

SUPPORTED_Q = (0.1, 0.05, 0.01, 0.005, 0.001, 0.0001)

GNUPLOT_TAU = """\
set datafile separator ','
set key autotitle columnhead
set xlabel 'year'
set ylabel 'tau (1/year)'
plot 'fig_tau_comparison.csv' using 1:2 with lines title 'dynamic', \\
     '' using 1:3 with lines title 'equilibrium'
"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _json_float(v: float):
    return None if v is None or not np.isfinite(v) else float(v)


def _write_json(path: Path, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


# -- subcommands -------------------------------------------------------------------

def cmd_fit_mu(args) -> int:
    data = load_wealth_per_capita(args.wealth)
    mu, se = fit_mu(data, args.t0)
    if args.out:
        write_table(args.out, ("mu", "stderr"), [(mu, se)])
    else:
        sys.stdout.write(f"mu,stderr\n{mu:.12g},{se:.12g}\n")
    return 0


def cmd_fit_sigma(args) -> int:
    closes = load_daily_closes(args.closes)
    table = sigma_by_year(closes)
    years = sorted({d.year for d in closes})
    skipped = [y for y in years if y not in table]
    if skipped:
        log.warning("years with fewer than 30 closes were skipped: %s", skipped)
    write_table(args.out, ("year", "sigma"), sorted(table.items()))
    return 0


def _fit_outputs(manifest: RunManifest):
    datasets = manifest.load_datasets()
    cfg = manifest.calibration
    raw = fit_tau_series(datasets, manifest.q, cfg)
    smoothed = smooth(raw, cfg.smoothing_window_years)
    validation = validate_forward(datasets, smoothed, manifest.q, cfg)
    return datasets, raw, smoothed, validation


def cmd_fit_tau(args) -> int:
    manifest = load_manifest(args.manifest)
    out = manifest.out_path
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RgbmWarning)
        datasets, raw, smoothed, validation = _fit_outputs(manifest)
    write_tau_series(out / "tau_raw.csv", raw)
    write_tau_series(out / "tau_smoothed.csv", smoothed)
    write_validation(out / "validation.csv", validation)
    _write_json(out / "run_summary.json", {
        "format_version": manifest.format_version,
        "q": manifest.q,
        "n_runs": raw.n_runs,
        "boundary_hit_years": [int(y) for y, h in zip(raw.years, raw.boundary_hits) if h],
        "fallback_years": [int(y) for y, h in zip(raw.years, raw.fallbacks) if h],
        "spinup_years": [int(y) for y, s in zip(raw.years, raw.spinup) if s],
        "validation_mean_abs_error": _json_float(validation.mean_abs_error()),
    })
    log.info("wrote tau_raw.csv, tau_smoothed.csv, validation.csv to %s", out)
    return 0


def cmd_smooth(args) -> int:
    series = read_tau_series(args.input)
    write_tau_series(args.out, smooth(series, args.window))
    return 0


def cmd_validate(args) -> int:
    manifest = load_manifest(args.manifest)
    series = read_tau_series(args.tau)
    result = validate_forward(manifest.load_datasets(), series, manifest.q, manifest.calibration)
    write_validation(args.out or manifest.out_path / "validation.csv", result)
    return 0


def cmd_eqm(args) -> int:
    if args.manifest is None:
        if args.q is None or args.share is None:
            raise UsageError("eqm needs either --manifest or both --q and --share")
        target = ShareTarget(args.q, args.share)
        tau = tau_eqm(target, args.sigma)
        sys.stdout.write("q,share,sigma,tau_eqm,equilibration_time\n")
        sys.stdout.write(f"{args.q:.12g},{args.share:.12g},{args.sigma:.12g},{tau:.12g},"
                         f"{equilibration_time(tau, args.sigma):.12g}\n")
        return 0

    manifest = load_manifest(args.manifest)
    out = manifest.out_path
    datasets = manifest.load_datasets()
    cfg = manifest.calibration
    table = tau_eqm_table(datasets, manifest.q, cfg)
    write_table(out / "tau_eqm.csv", ("year", "tau_eqm", "feasible"),
                zip(table.years, table.tau_eqm, table.feasible))
    smoothed_path = out / "tau_smoothed.csv"
    if smoothed_path.exists():
        dynamic = read_tau_series(smoothed_path, provenance="smoothed").as_mapping()
        eqm = dict(zip(table.years.tolist(), table.tau_eqm.tolist()))
        write_table(out / "fig_tau_comparison.csv", ("year", "tau_dynamic", "tau_eqm"),
                    [(y, dynamic[y], eqm.get(y)) for y in sorted(dynamic)])
        if args.gnuplot:
            atomic_write_text(out / "fig_tau_comparison.gp", GNUPLOT_TAU)
    if args.validate:
        rates = table.for_simulation(cfg.tau_bracket)
        years = table.years[1:]
        series = TauSeries(years=years, tau=[rates[int(y)] for y in years],
                           stderr=np.full(years.size, np.nan), provenance="equilibrium")
        write_validation(out / "validation_eqm.csv",
                         validate_forward(datasets, series, manifest.q, cfg))
    return 0


def cmd_simulate(args) -> int:
    cfg = StepConfig(args.substeps)
    if args.init == "equal":
        ens = Ensemble(wealths=np.ones(args.n), time=float(args.start_year), seed=args.seed)
    else:
        ens = init_lognormal(args.n, ShareTarget(args.q, args.share), args.seed,
                             time=float(args.start_year))
    params = ModelParams(args.mu, args.sigma, args.tau)
    rows = []

    def record(e: Ensemble):
        w = e.wealths
        rows.append((e.year, float(np.mean(w)), float(np.median(w)), float(w.min()),
                     float(w.max()), top_share(w, args.q), gini(w),
                     float(np.mean(w < 0))))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RgbmWarning)
        record(ens)
        final = simulate_years(ens, params, args.years, cfg, observer=record)
    out = Path(args.out)
    write_table(out / "simulate.csv",
                ("year", "mean", "median", "min", "max", "top_share", "gini", "negative_frac"),
                rows)
    write_snapshot(out / "snapshot.csv", final)
    return 0


def _parse_schedule(text: str) -> list[float]:
    taus = []
    for part in text.split(","):
        try:
            value, years = part.split("*")
            taus.extend([float(value)] * int(years))
        except ValueError:
            raise UsageError(f"bad schedule segment {part!r}; expected TAU*YEARS") from None
    if not taus:
        raise UsageError("empty tau schedule")
    return taus


def cmd_synth(args) -> int:
    taus = _parse_schedule(args.schedule)
    quantiles = sorted({float(q) for q in args.quantiles.split(",")} | {args.q}, reverse=True)
    t0 = args.start_year
    ens = init_lognormal(args.n, ShareTarget(args.q, args.share), args.seed, time=float(t0))
    years = list(range(t0 + 1, t0 + 1 + len(taus)))
    schedule = {y - 1: ModelParams(args.mu, args.sigma, t) for y, t in zip(years, taus)}
    rows = []

    def record(e: Ensemble):
        for q in quantiles:
            s = top_share(e.wealths, q)
            if not 0.0 < s <= 1.0:
                raise DataError(f"synthetic top-{q:g} share {s:.6g} in year {e.year} leaves (0, 1]; "
                                "use a milder schedule or a lower starting share")
            rows.append((e.year, q, s))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RgbmWarning)
        record(ens)
        simulate_years(ens, schedule, len(taus), StepConfig(args.substeps), observer=record)
    out = Path(args.out)
    write_table(out / "shares.csv", ("year", "q", "share"), rows)
    write_table(out / "tau_true.csv", ("year", "tau"), zip(years, taus))
    cal = CalibrationConfig(n_agents=args.n, n_runs=args.runs, seed=args.fit_seed,
                            substeps_per_year=args.substeps, mu=args.mu, default_sigma=args.sigma)
    dump_manifest(out / "manifest.json",
                  RunManifest(datasets=DatasetPaths(shares="shares.csv"), q=args.q,
                              output_dir="fit", calibration=cal))
    return 0


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rgbm", description="Reallocating GBM wealth model and tau calibration.")
    p.add_argument("--version", action="version", version=f"rgbm {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("fit-mu", help="growth rate of wealth per capita")
    s.add_argument("--wealth", required=True, help="wealth_per_capita.csv")
    s.add_argument("--t0", type=int, default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_fit_mu)

    s = sub.add_parser("fit-sigma", help="annual volatility from daily closes")
    s.add_argument("--closes", required=True, help="closes.csv")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_sigma)

    s = sub.add_parser("fit-tau", help="fit, smooth and validate tau(t)")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_fit_tau)

    s = sub.add_parser("smooth", help="central moving average of a tau table")
    s.add_argument("--input", required=True)
    s.add_argument("--window", type=int, default=10)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_smooth)

    s = sub.add_parser("validate", help="forward-propagate a tau table against the data")
    s.add_argument("--manifest", required=True)
    s.add_argument("--tau", required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("eqm", help="equilibrium reallocation rate")
    s.add_argument("--manifest", default=None)
    s.add_argument("--q", type=float, default=None)
    s.add_argument("--share", type=float, default=None)
    s.add_argument("--sigma", type=float, default=0.16)
    s.add_argument("--validate", action="store_true",
                   help="also propagate the data's start under tau_eqm (validation_eqm.csv)")
    s.add_argument("--gnuplot", action="store_true")
    s.set_defaults(func=cmd_eqm)

    s = sub.add_parser("simulate", help="run the model with a constant tau")
    s.add_argument("--tau", type=float, required=True)
    s.add_argument("--mu", type=float, default=0.021)
    s.add_argument("--sigma", type=float, default=0.14)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--years", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--start-year", type=int, default=0)
    s.add_argument("--substeps", type=int, default=52)
    s.add_argument("--init", choices=("equal", "lognormal"), default="equal")
    s.add_argument("--q", type=float, default=0.1)
    s.add_argument("--share", type=float, default=0.66, help="initial top-q share (lognormal)")
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("synth", help="synthetic share data from a known tau schedule")
    s.add_argument("--out", required=True)
    s.add_argument("--schedule", default="0.02*40,-0.02*40", help="TAU*YEARS[,TAU*YEARS...]")
    s.add_argument("--n", type=int, default=100_000)
    s.add_argument("--seed", type=int, default=2024)
    s.add_argument("--fit-seed", type=int, default=7, help="seed written to the manifest")
    s.add_argument("--runs", type=int, default=10, help="n_runs written to the manifest")
    s.add_argument("--start-year", type=int, default=1900)
    s.add_argument("--mu", type=float, default=0.021)
    s.add_argument("--sigma", type=float, default=0.14)
    s.add_argument("--q", type=float, default=0.1)
    s.add_argument("--share", type=float, default=0.5, help="initial top-q share")
    s.add_argument("--quantiles", default=",".join(str(q) for q in SUPPORTED_Q))
    s.add_argument("--substeps", type=int, default=52)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except RgbmError as exc:
        sys.stderr.write(json.dumps({"error": exc.code, "message": str(exc)}) + "\n")
        return 2
    except Exception as exc:  # pragma: no cover - last-resort reporting
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1


run_command = main

if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: `epiident <subcommand> [options]`.

Every subcommand writes only inside its --out directory, records a
manifest.json (sorted keys) before its results are complete, and emits CSV
with LF line endings.  Exit codes: 0 success, 1 usage error, 2 computational
failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import math
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import scenarios as scn
from .rng import DEFAULT_SEED, GENERATOR_NAME, RngSeed, generator_version
from .svg import Plot

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

ANCHORS = ((0.33, 0.0004), (0.10, 0.0004), (0.10, 0.0008), (0.14, 0.0020))
TABLE_METHODS = ("ctmc", "gaussian:0.1", "gaussian:0.2", "empirical", "hybrid")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def tool_version() -> str:
    try:
        return metadata.version("epiident")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Manifest:
    """Run manifest; written at start and rewritten with results and end time."""

    def __init__(self, out: Path, argv: list[str], seed: int, threads: int):
        self.path = out / "manifest.json"
        self.data = {
            "command": ["epiident", *argv],
            "seed": seed,
            "threads": threads,
            "tool_version": tool_version(),
            "prng": {"name": GENERATOR_NAME, "version": generator_version()},
            "scenarios": {},
            "exclusions": {},
            "started": _now(),
            "finished": None,
        }
        self.write()

    def scenario(self, s: scn.Scenario) -> None:
        self.data["scenarios"][s.label] = s.digest()

    def exclusions(self, step: str, count: int) -> None:
        self.data["exclusions"][step] = int(count)

    def write(self) -> None:
        with open(self.path, "w", newline="\n") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def finish(self, **extra) -> None:
        self.data.update(extra)
        self.data["finished"] = _now()
        self.write()


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


# -- argument grammar ---------------------------------------------------------------


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text!r}")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid number {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text!r}")
    return v


def _level(text: str) -> float:
    v = _positive_float(text)
    if not v < 1:
        raise argparse.ArgumentTypeError("level must lie in (0, 1)")
    return v


def _method(text: str):
    from .coverage import Method

    try:
        return Method.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _common(p: argparse.ArgumentParser, out: bool = True) -> None:
    p.add_argument("--seed", type=int, default=DEFAULT_SEED,
                   help=f"master seed (default {DEFAULT_SEED})")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="worker processes (default: available cores); results do not depend on it")
    if out:
        p.add_argument("--out", type=Path, default=Path("."), help="results directory")


def _scenario_args(p: argparse.ArgumentParser, single: bool = True,
                   initial: int | None = scn.DEFAULT_INITIAL_INFECTIOUS) -> None:
    p.add_argument("--n", type=_positive_int, default=scn.REFERENCE_POPULATION,
                   help="population size")
    p.add_argument("--initial", type=_positive_int, default=initial,
                   help="initially infectious individuals")
    p.add_argument("--horizon", type=_positive_float, default=150.0, help="days observed")
    if single:
        p.add_argument("--alpha", type=_positive_float, default=0.1, help="recovery rate")
        p.add_argument("--beta", type=_positive_float, default=0.0004, help="transmission rate")


def _scenario_set(p: argparse.ArgumentParser, default: str) -> None:
    p.add_argument("--scenarios", default=default,
                   help="'all', 'anchors', or comma-separated indices into the 16-scenario grid")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="epiident", description="Practical identifiability of the SIR model under "
                 "stochastic and synthetic noise.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("scenarios", help="list the 16-scenario parameter grid")
    p.add_argument("action", choices=["list"])
    p.add_argument("--n", type=_positive_int, default=scn.REFERENCE_POPULATION)
    p.add_argument("--initial", type=_positive_int, default=scn.DEFAULT_INITIAL_INFECTIOUS)
    p.add_argument("--format", choices=["table", "csv", "json"], default="table")

    p = sub.add_parser("simulate", help="ODE solution and a CTMC ensemble")
    _scenario_args(p)
    p.add_argument("--runs", type=_positive_int, default=1000)
    _common(p)

    p = sub.add_parser("residuals", help="residual scatter, autocorrelation, variance vs mean")
    _scenario_args(p)
    p.add_argument("--runs", type=_positive_int, default=1000)
    p.add_argument("--sigma", type=_positive_float, default=0.1,
                   help="Gaussian noise level for the comparison ACF")
    p.add_argument("--max-lag", type=_positive_int, default=30)
    _common(p)

    p = sub.add_parser("distfit", help="per-stratum distribution fits, AIC wins, A-D tests")
    _scenario_args(p, single=False)
    _scenario_set(p, "all")
    p.add_argument("--runs", type=_positive_int, default=1000)
    p.add_argument("--bins", type=_positive_int, default=10)
    _common(p)

    p = sub.add_parser("coverage", help="coverage of KDE confidence regions")
    _scenario_args(p, single=False)
    _scenario_set(p, "anchors")
    p.add_argument("--methods", default=",".join(TABLE_METHODS),
                   help="comma-separated: ctmc, gaussian:<sigma>, "
                        "gaussian_unclamped:<sigma>, empirical, hybrid")
    p.add_argument("--j", type=_positive_int, default=30, help="outer truth realizations")
    p.add_argument("--m", type=_positive_int, default=300, help="inner datasets per trial")
    p.add_argument("--level", type=_level, default=0.68)
    p.add_argument("--reference-runs", type=_positive_int, default=1000)
    p.add_argument("--truth", choices=["ctmc", "method"], default="ctmc",
                   help="simulator of the outer truth realizations")
    p.add_argument("--keep-extinct", action="store_true",
                   help="keep CTMC runs that never take off (default: drop and redraw)")
    p.add_argument("--sigma-min", action="store_true",
                   help="also search the smallest Gaussian sigma reaching the level")
    _common(p)

    p = sub.add_parser("identify", help="Monte Carlo identifiability spread for one method")
    _scenario_args(p)
    p.add_argument("--method", type=_method, default=_method("ctmc"))
    p.add_argument("--m", type=_positive_int, default=1000)
    p.add_argument("--reference-runs", type=_positive_int, default=1000)
    _common(p)

    p = sub.add_parser("warp", help="amplitude/shift statistics across scenarios and N")
    _scenario_args(p, single=False)
    _scenario_set(p, "all")
    p.add_argument("--populations", default="500,1000,5000")
    p.add_argument("--runs", type=_positive_int, default=500)
    _common(p)

    p = sub.add_parser("study", help="control-strategy or registration demonstrations")
    p.add_argument("which", choices=["control", "register"])
    # control starts from the first observed case unless --initial is given
    _scenario_args(p, initial=None)
    p.add_argument("--count", type=_positive_int, default=100, help="control: cloud size")
    p.add_argument("--window", type=_positive_float, default=15.0,
                   help="control: days of cumulative incidence data")
    p.add_argument("--noise", type=float, default=0.2,
                   help="control: relative Gaussian noise on the data")
    p.add_argument("--reduction", type=float, default=0.6)
    p.add_argument("--intervention", type=float, default=7.0)
    p.add_argument("--runs", type=_positive_int, default=200, help="register: CTMC runs")
    _common(p)

    p = sub.add_parser("report", help="collect results directories into one markdown report")
    p.add_argument("dir", type=Path)
    p.add_argument("--out", type=Path, default=None, help="report path (default DIR/report.md)")
    return ap


# -- helpers -----------------------------------------------------------------------


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    from .parallel import default_threads

    return default_threads()


def _single(args) -> scn.Scenario:
    return scn.make_scenario(args.alpha, args.beta, args.n, args.initial, args.horizon)


def _select(args) -> tuple[list[scn.Scenario], list[int]]:
    grid = scn.paper_grid(args.n, args.initial, args.horizon)
    text = args.scenarios.strip()
    if text == "all":
        return grid, list(range(len(grid)))
    if text == "anchors":
        rescale = scn.REFERENCE_POPULATION / args.n
        chosen = [scn.find_scenario(grid, a, b * rescale) for a, b in ANCHORS]
        return chosen, [grid.index(s) for s in chosen]
    try:
        idx = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"invalid --scenarios value {text!r}") from None
    if not idx or any(i < 0 or i >= len(grid) for i in idx):
        raise UsageError(f"--scenarios indices must lie in 0..{len(grid) - 1}")
    return [grid[i] for i in idx], idx


def _prepare_out(args) -> Path:
    out = args.out.resolve()
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands --------------------------------------------------------------------


def cmd_scenarios(args, argv) -> int:
    grid = scn.paper_grid(args.n, args.initial)
    if args.format == "json":
        rows = [{"index": i, "label": g.label, "alpha": g.params.alpha, "beta": g.params.beta,
                 "population": g.params.population, "R0": round(g.r0, 4)}
                for i, g in enumerate(grid)]
        print(json.dumps(rows, indent=2, sort_keys=True))
    elif args.format == "csv":
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["index", "label", "alpha", "beta", "population", "R0"])
        for i, g in enumerate(grid):
            w.writerow([i, g.label, repr(g.params.alpha), repr(g.params.beta),
                        g.params.population, f"{g.r0:.2f}"])
    else:
        print(f"{'idx':>3}  {'alpha':>6}  {'beta':>9}  {'R0':>6}  label")
        for i, g in enumerate(grid):
            print(f"{i:>3}  {g.params.alpha:>6.2f}  {g.params.beta:>9.6f}  {g.r0:>6.2f}  {g.label}")
    return EXIT_OK


def cmd_simulate(args, argv) -> int:
    from .ctmc import run_ensemble
    from .sir import integrate_sir, write_trajectory_csv

    out = _prepare_out(args)
    threads = _threads(args)
    man = Manifest(out, argv, args.seed, threads)
    sc = _single(args)
    man.scenario(sc)
    ode = integrate_sir(sc.params, sc.initial, sc.grid)
    write_trajectory_csv(ode, out / "ode.csv")
    ens = run_ensemble(sc.params, sc.initial, sc.grid, args.runs, RngSeed(args.seed), threads)
    ens.write_csv(out / "ensemble.csv")
    man.exclusions("no_takeoff", int((~ens.took_off()).sum()))
    plot = Plot("CTMC prevalence", "t (days)", "I(t)")
    for row in ens.values[:50]:
        plot.line(sc.grid.times, row, 0, 0.8, 0.3)
    plot.line(sc.grid.times, ode.prevalence, 5, 2.0)
    plot.save(out / "trajectories.svg")
    man.finish()
    return EXIT_OK


def cmd_residuals(args, argv) -> int:
    from .ctmc import run_ensemble
    from .residuals import ensemble_acf, residual_series, variance_mean, write_residual_scatter
    from .sir import integrate_sir
    from .synth import gaussian_values

    out = _prepare_out(args)
    threads = _threads(args)
    man = Manifest(out, argv, args.seed, threads)
    sc = _single(args)
    man.scenario(sc)
    ode = integrate_sir(sc.params, sc.initial, sc.grid)
    ens = run_ensemble(sc.params, sc.initial, sc.grid, args.runs, RngSeed(args.seed), threads)
    took = ens.filtered()
    man.exclusions("no_takeoff", len(ens) - len(took))
    write_residual_scatter(took.values, ode, out / "residual_scatter.csv")
    ctmc_acf = ensemble_acf(residual_series(took.values, ode), args.max_lag)
    gvals = gaussian_values(ode.prevalence, args.sigma, RngSeed(args.seed, 1).generator(),
                            len(took))
    gauss_acf = ensemble_acf(residual_series(gvals, ode), args.max_lag)
    man.exclusions("acf_undefined_ctmc", ctmc_acf.runs_skipped)
    man.exclusions("acf_undefined_gaussian", gauss_acf.runs_skipped)
    rows = []
    for label, c in (("ctmc", ctmc_acf), (f"gaussian:{args.sigma:g}", gauss_acf)):
        for k in range(c.lags.size):
            rows.append([label, int(c.lags[k]), _num(c.mean[k]), _num(c.lower[k]),
                         _num(c.upper[k])])
    _write_rows(out / "acf.csv", ["source", "lag", "mean", "lower", "upper"], rows)
    vm = variance_mean(ens, ode)
    vm.write_csv(out / "var_mean.csv")
    Plot("Residual autocorrelation", "lag", "ACF").line(
        ctmc_acf.lags, ctmc_acf.mean, 0).line(gauss_acf.lags, gauss_acf.mean, 1).save(
        out / "acf.svg")
    pre = vm.phases == "pre"
    Plot("Variance vs mean", "mean", "variance").scatter(
        vm.mean[pre], vm.variance[pre], 1, 2.0).scatter(
        vm.mean[~pre], vm.variance[~pre], 0, 2.0).line(
        [0, vm.mean.max()], [0, vm.mean.max()], 5).save(out / "var_mean.svg")
    man.finish(super_poisson_fraction_pre=vm.super_poisson_fraction("pre"),
               acf_lag1_ctmc=float(ctmc_acf.mean[1]))
    return EXIT_OK


def _banks(selected, args, threads, man):
    from .ctmc import run_ensemble
    from .sir import integrate_sir
    from .synth import build_residual_bank

    banks = {}
    for sc, si in selected:
        man.scenario(sc)
        ode = integrate_sir(sc.params, sc.initial, sc.grid)
        ens = run_ensemble(sc.params, sc.initial, sc.grid, args.runs,
                           RngSeed(args.seed, (si + 1) << 32), threads)
        took = ens.filtered()
        man.exclusions(f"no_takeoff:{sc.label}", len(ens) - len(took))
        banks[sc.label] = (build_residual_bank(took, ode, args.bins, sc.label), sc.r0)
    return banks


def cmd_distfit(args, argv) -> int:
    from .distfit import (
        AD_CRITICAL_VALUES,
        FAMILIES,
        ad_rejection_rates,
        aic_win_table,
        fit_strata,
        write_fits_csv,
    )

    out = _prepare_out(args)
    threads = _threads(args)
    man = Manifest(out, argv, args.seed, threads)
    chosen, idx = _select(args)
    banks = _banks(list(zip(chosen, idx)), args, threads, man)
    fits = fit_strata(banks)
    write_fits_csv(fits, out / "fits.csv")
    rows = []
    for strat in ("overall", "by_r0_band", "by_phase"):
        for cell, shares in sorted(aic_win_table(fits, strat).items()):
            rows.append([strat, cell] + [_num(shares[f]) for f in FAMILIES])
    _write_rows(out / "aic_wins.csv", ["stratification", "cell", *FAMILIES], rows)
    rates = ad_rejection_rates(banks)
    _write_rows(out / "ad_rejections.csv", ["level", "phase", "rate"],
                [[lvl, ph, _num(rates[ph][lvl])] for lvl in AD_CRITICAL_VALUES
                 for ph in ("pre", "post", "both")])
    man.finish(stratum_fits=len(fits))
    return EXIT_OK


def cmd_coverage(args, argv) -> int:
    from .coverage import (
        CoverageConfig,
        Method,
        coverage_table,
        sigma_min_search,
        write_coverage_csv,
    )

    try:
        methods = [Method.parse(t) for t in args.methods.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"--methods: {exc}") from None
    if args.j < 2:
        raise UsageError("--j must be at least 2")
    if args.m < 50:
        raise UsageError("--m must be at least 50")
    out = _prepare_out(args)
    threads = _threads(args)
    man = Manifest(out, argv, args.seed, threads)
    chosen, idx = _select(args)
    for s in chosen:
        man.scenario(s)
    cfg = CoverageConfig(j_outer=args.j, m_inner=args.m, level=args.level, seed=args.seed,
                         reference_runs=args.reference_runs, truth=args.truth,
                         keep_extinct=args.keep_extinct, threads=threads)
    man.data["level"] = args.level
    table = coverage_table(chosen, methods, cfg, idx)
    write_coverage_csv(table, chosen, methods, out / "coverage_table.csv", args.level)
    write_coverage_cells(out / "coverage_cells.csv", chosen, methods, table)
    for sc, row in zip(chosen, table):
        for m, rep in zip(methods, row):
            if rep is not None:
                man.exclusions(f"{sc.label}:{m.label}", rep.excluded + rep.extinct_truth)
            else:
                man.exclusions(f"{sc.label}:{m.label}", -1)
    extra = {}
    if args.sigma_min:
        rows, curve = [], []
        for sc, si in zip(chosen, idx):
            res = sigma_min_search(sc, args.level, cfg, scenario_index=si)
            rows.append([sc.label, f"{sc.r0:.4f}", _num(res.sigma_min), str(res.saturated).lower()])
            curve += [[sc.label, _num(s), _num(c)] for s, c in sorted(res.curve)]
        _write_rows(out / "sigma_min.csv", ["scenario", "R0", "sigma_min", "saturated"], rows)
        _write_rows(out / "sigma_curve.csv", ["scenario", "sigma", "coverage"], curve)
        extra["sigma_min_noise"] = "gaussian_unclamped"
    man.finish(**extra)
    return EXIT_OK


def write_coverage_cells(path, chosen, methods, table) -> None:
    rows = []
    for sc, row in zip(chosen, table):
        for m, rep in zip(methods, row):
            if rep is None:
                rows.append([sc.label, m.label, "", "", "", "", "failed"])
                continue
            rows.append([sc.label, m.label, f"{rep.coverage:.4f}", len(rep.membership),
                         rep.excluded, rep.extinct_truth, ""])
    _write_rows(path, ["scenario", "method", "coverage", "j_used", "excluded", "extinct_truth",
                       "status"], rows)


def cmd_identify(args, argv) -> int:
    from .identify import (
        IdentifyConfig,
        ellipse_outline,
        mc_identifiability,
        write_estimates,
        write_summary,
    )

    if args.m < 50:
        raise UsageError("--m must be at least 50")
    out = _prepare_out(args)
    threads = _threads(args)
    man = Manifest(out, argv, args.seed, threads)
    sc = _single(args)
    man.scenario(sc)
    summary = mc_identifiability(sc, args.method, args.m, args.seed,
                                 IdentifyConfig(reference_runs=args.reference_runs))
    man.exclusions("fit_failures", summary.excluded)
    write_estimates(summary, out / "estimates.csv")
    write_summary(summary, out / "summary.json")
    est = summary.estimates
    plot = Plot(f"Estimates ({summary.method})", "alpha", "beta").scatter(est[:, 0], est[:, 1])
    if summary.ellipse is not None:
        ring = ellipse_outline(summary.ellipse)
        plot.line(ring[:, 0], ring[:, 1], 1)
    plot.scatter([sc.params.alpha], [sc.params.beta], 5, 4.0, 1.0)
    plot.save(out / "scatter.svg")
    man.finish()
    return EXIT_OK


def cmd_warp(args, argv) -> int:
    from .synth import warp_statistics

    try:
        pops = [int(t) for t in args.populations.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"invalid --populations value {args.populations!r}") from None
    if not pops or min(pops) < 2:
        raise UsageError("--populations needs integers >= 2")
    out = _prepare_out(args)
    threads = _threads(args)
    man = Manifest(out, argv, args.seed, threads)
    chosen, _ = _select(args)
    for s in chosen:
        man.scenario(s)
    rows = warp_statistics(chosen, pops, args.runs, args.seed, threads)
    _write_rows(out / "warp_stats.csv",
                ["scenario", "R0", "N", "runs", "took_off", "mean_a", "sd_a", "mean_dt", "sd_dt"],
                [[r.label, f"{r.r0:.4f}", r.population, r.runs, r.took_off, _num(r.mean_a),
                  _num(r.sd_a), _num(r.mean_dt), _num(r.sd_dt)] for r in rows])
    man.exclusions("cells_missing", sum(r.missing for r in rows))
    man.finish()
    return EXIT_OK


def cmd_study(args, argv) -> int:
    from .sir import integrate_sir

    out = _prepare_out(args)
    threads = _threads(args)
    man = Manifest(out, argv, args.seed, threads)
    if args.initial is None:
        args.initial = 1 if args.which == "control" else scn.DEFAULT_INITIAL_INFECTIOUS
    sc = _single(args)
    man.scenario(sc)
    if args.which == "control":
        from .studies import (
            ControlScenario,
            controlled_path,
            fit_cloud_to_incidence,
            incidence_data,
            project_control,
        )

        if not 0 < args.reduction <= 1:
            raise UsageError("--reduction must lie in (0, 1]")
        data = incidence_data(sc.params, sc.initial, args.window, args.noise,
                              RngSeed(args.seed, 1))
        cloud = fit_cloud_to_incidence(data, args.count, RngSeed(args.seed, 2), sc.initial)
        ctl = ControlScenario(sc.params, args.reduction, args.intervention, args.horizon)
        proj = project_control(cloud.params, ctl, sc.initial)
        man.exclusions("integration_failures", proj.excluded)
        _write_rows(out / "data.csv", ["t", "cumulative_incidence"],
                    [[f"{t:.6f}", _num(v)] for t, v in zip(data.times, data.prevalence)])
        fit_plot = Plot("Near-equivalent fits", "t (days)", "cumulative incidence")
        proj_plot = Plot("Projection under control", "t (days)", "cumulative incidence")
        fan = []
        for k, (a, b) in enumerate(proj.pairs):
            t, st = controlled_path(a, b, sc.initial, ctl)
            base = integrate_sir(sc.params.with_rates(a, b), sc.initial, data.grid)
            cum0 = sc.params.population - base.susceptible
            fit_plot.line(data.times, cum0, 0, 0.8, 0.3)
            daily = np.rint(t * 1e6) % 1_000_000 == 0
            cum = sc.params.population - st[daily, 0]
            proj_plot.line(t[daily], cum, 0, 0.8, 0.3)
            fan += [[k, f"{tt:.6f}", _num(c)] for tt, c in zip(t[daily], cum)]
        fit_plot.scatter(data.times, data.prevalence, 5, 2.5, 1.0)
        fit_plot.save(out / "fits.svg")
        proj_plot.save(out / "projections.svg")
        _write_rows(out / "projection_fan.csv", ["pair_id", "t", "cumulative_incidence"], fan)
        proj.write_csv(out / "projections.csv")
        proj.write_histogram_csv(out / "histogram.csv")
        Plot("Final cumulative incidence", "final size", "count").histogram(
            proj.bin_edges, proj.counts).save(out / "histogram.svg")
        man.finish(spread_ratio=proj.spread_ratio, qualified_fits=cloud.qualified)
        return EXIT_OK

    from .ctmc import run_ensemble
    from .studies import register_at_peak

    ode = integrate_sir(sc.params, sc.initial, sc.grid)
    ens = run_ensemble(sc.params, sc.initial, sc.grid, args.runs, RngSeed(args.seed), threads)
    reg = register_at_peak(ens, ode)
    man.exclusions("no_takeoff", reg.skipped)
    reg.write_csv(out / "registration.csv", ode)
    rows = []
    for k, row in enumerate(reg.aligned):
        rows += [[k, f"{t:.6f}", _num(v)] for t, v in zip(ode.times, row) if np.isfinite(v)]
    _write_rows(out / "aligned.csv", ["run", "t", "I"], rows)
    took = ens.values[ens.took_off()]
    raw = Plot("CTMC trajectories", "t (days)", "I(t)")
    aligned = Plot("Peak-aligned", "t (days)", "I(t)")
    for v, a in zip(took, reg.aligned):
        raw.line(ode.times, v, 0, 0.8, 0.25)
        aligned.line(ode.times, a, 0, 0.8, 0.25)
    raw.save(out / "raw.svg")
    aligned.save(out / "aligned.svg")
    Plot("Means", "t (days)", "I(t)").line(ode.times, ode.prevalence, 5, 2.0).line(
        ode.times, reg.registered_mean.prevalence, 1).line(
        ode.times, reg.unaligned_mean.prevalence, 0).save(out / "means.svg")
    peak = float(ode.prevalence.max())
    man.finish(rmse_registered_over_peak=reg.rmse_registered / peak,
               rmse_unaligned_over_peak=reg.rmse_unaligned / peak)
    return EXIT_OK


# -- report -------------------------------------------------------------------------


def _manifest_value(path: Path, key: str, default):
    try:
        return json.loads(path.read_text()).get(key, default)
    except (OSError, json.JSONDecodeError):
        return default


def emit_report(results: Path, band: float = 0.10) -> str:
    """Markdown summary of every result directory under `results` (recursively)."""
    results = Path(results)
    lines = ["# Results report", ""]
    manifests = sorted(results.rglob("manifest.json")) if results.is_dir() else []
    if not manifests:
        lines += ["## Coverage", "", "no results", "", "## Identifiability", "", "no results", ""]
        return "\n".join(lines) + "\n"

    cov_files = sorted(results.rglob("coverage_table.csv"))
    lines += ["## Coverage", ""]
    if not cov_files:
        lines += ["no results", ""]
    for path in cov_files:
        level = _manifest_value(path.with_name("manifest.json"), "level", 0.68)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
        methods = [h for h in header[4:] if not h.endswith("_within_10pct")]
        lines.append(f"`{path.relative_to(results)}`, nominal level {level:g}; "
                     f"**bold** = within ±{band:.2f} of nominal, `-` = missing or failed")
        lines.append("")
        lines.append("| alpha | beta | R0 | " + " | ".join(methods) + " |")
        lines.append("|---|---|---|" + "---|" * len(methods))
        for r in rows:
            cells = []
            for v in r[4:4 + len(methods)]:
                if v == "":
                    cells.append("-")
                elif abs(float(v) - level) <= band + 1e-12:
                    cells.append(f"**{float(v):.2f}**")
                else:
                    cells.append(f"{float(v):.2f}")
            lines.append(f"| {float(r[0]):.2f} | {float(r[1]):.5f} | {float(r[2]):.2f} | "
                         + " | ".join(cells) + " |")
        lines.append("")

    lines += ["## Identifiability", ""]
    summaries = sorted(results.rglob("summary.json"))
    if not summaries:
        lines += ["no results", ""]
    else:
        lines += ["| method | CV alpha (%) | CV beta (%) | ARE alpha (%) | ARE beta (%) | n |",
                  "|---|---|---|---|---|---|"]
        for path in summaries:
            d = json.loads(path.read_text())
            lines.append(f"| {d['method']} | {d['alpha_cv_percent']:.2f} | "
                         f"{d['beta_cv_percent']:.2f} | {d['alpha_are_percent']:.2f} | "
                         f"{d['beta_are_percent']:.2f} | {d['count']} |")
        lines.append("")

    lines += ["## Runs", ""]
    for path in manifests:
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError:
            lines.append(f"- `{path.relative_to(results)}`: unreadable manifest")
            continue
        status = "complete" if d.get("finished") else "incomplete"
        lines.append(f"- `{path.parent.relative_to(results)}`: `{' '.join(d.get('command', []))}` "
                     f"(seed {d.get('seed')}, {status})")
    lines.append("")
    figs = sorted(p.relative_to(results) for p in results.rglob("*.svg"))
    if figs:
        lines += ["## Figures", ""] + [f"- `{p}`" for p in figs] + [""]
    return "\n".join(lines) + "\n"


def cmd_report(args, argv) -> int:
    if not args.dir.is_dir():
        raise UsageError(f"{args.dir} is not a directory")
    target = args.out or args.dir / "report.md"
    text = emit_report(args.dir)
    with open(target, "w", newline="\n") as fh:
        fh.write(text)
    print(target)
    return EXIT_OK


COMMANDS = {
    "scenarios": cmd_scenarios,
    "simulate": cmd_simulate,
    "residuals": cmd_residuals,
    "distfit": cmd_distfit,
    "coverage": cmd_coverage,
    "identify": cmd_identify,
    "warp": cmd_warp,
    "study": cmd_study,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"computation failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

"""Batch front end: price, bsde, norms, verify, sweep.

One JSON config drives every command; outputs are JSON summaries and CSV
tables with fixed 17-significant-digit scientific formatting, so identical
config plus seed reproduces byte-identical files.  Exit codes: 0 success,
1 verification hard-gate failure, 2 config error, 3 numeric failure.
"""

from __future__ import annotations

import csv
import json
import sys

import click
import numpy as np

from . import bsde as bsde_mod
from . import verify as verify_mod
from .config import ConfigError, RunConfig, load_config, validate_summary
from .lattice import ExponentialGuardError, LatticeSizeError, build_lattice
from .norms import bmo_norm_rv, h_bmo_norm, h_norm, measure_kappa, sup_norm
from .pricer import NumericalError, price_equilibrium, price_raw
from .scenario import evaluate_market, hitting_time_tau

EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _fmt(x: float) -> str:
    return f"{x:.16e}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _write_json(path: str, doc: dict):
    with open(path, "w") as handle:
        json.dump(_jsonable(doc), handle, indent=2, sort_keys=True)
        handle.write("\n")


def _write_csv(path: str, header: list[str], rows):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([
                _fmt(v) if isinstance(v, (float, np.floating)) else v for v in row
            ])


def _load(config_path: str) -> RunConfig:
    try:
        return load_config(config_path)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


def _build(run: RunConfig):
    try:
        return build_lattice(run.market.num_steps, run.market.horizon)
    except LatticeSizeError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


def _instance_norms(run: RunConfig, lattice) -> dict:
    gamma, gamma_sup, psi, psi_mean = evaluate_market(run.market, lattice)
    centered = psi - psi.mean(axis=0)
    psi_bmo = bmo_norm_rv(centered, lattice).value
    gauge = h_norm(centered, lattice, bisection_tol=run.norms.bisection_tol)
    return {
        "demand_sup": gamma_sup,
        "dividend_mean": psi_mean.tolist(),
        "centered_dividend_bmo": psi_bmo,
        "centered_dividend_gauge": gauge.value,
        "gauge_achieving_node": list(gauge.achieving_node),
        "smallness_product": run.market.risk_aversion * gamma_sup * psi_bmo,
    }


@click.group()
def main():
    """Demand-based equilibrium pricing laboratory."""


@main.command("price")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--dump-nodes", "dump_path", default=None, type=click.Path(),
              help="Also write the per-node CSV table here.")
def cmd_price(config_path, out_path, dump_path):
    """Price the configured instance and write a solution summary."""
    run = _load(config_path)
    lattice = _build(run)
    try:
        sol = price_equilibrium(lattice, run.market)
    except (NumericalError, ExponentialGuardError) as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)
    summary = {
        "command": "price",
        "initial_price": sol.initial_price.tolist(),
        "initial_certainty": sol.initial_certainty,
        "mpr_representation_gap": sol.mpr_gap(),
        "volatility_bmo": h_bmo_norm(sol.volatility).value,
        "mpr_bmo": h_bmo_norm(sol.market_price_of_risk).value,
        "norms": _instance_norms(run, lattice),
    }
    validate_summary(summary)
    _write_json(out_path, summary)
    if dump_path or run.output.dump_nodes:
        _write_csv(dump_path or out_path + ".nodes.csv",
                   sol.node_header(), sol.node_rows())
    click.echo(f"price: S0={sol.initial_price.tolist()} R0={sol.initial_certainty:.12g}")


@main.command("bsde")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--method", default=None,
              type=click.Choice(["explicit", "picard", "both"]),
              help="Override the solver method from the config.")
@click.option("--diagnostics", "diag_path", default=None, type=click.Path(),
              help="Write the per-iteration CSV here (picard/both).")
@click.option("--dump-nodes", "dump_path", default=None, type=click.Path(),
              help="Also write the per-node CSV table here.")
def cmd_bsde(config_path, out_path, method, diag_path, dump_path):
    """Solve the backward system; non-convergence is reported, not fatal."""
    run = _load(config_path)
    lattice = _build(run)
    method = method or run.solver.method
    summary: dict = {"command": "bsde", "method": method}
    try:
        if method in ("explicit", "both"):
            exp = bsde_mod.solve_explicit(lattice, run.market)
            summary["initial_price"] = exp.prices.values[0][0].tolist()
            summary["initial_certainty"] = float(exp.certainty_equivalent.values[0][0])
            summary["residual_explicit"] = exp.residual
        if method in ("picard", "both"):
            kappa = run.solver.kappa
            if kappa is None:
                kappa = measure_kappa(lattice)
            pic, diag = bsde_mod.solve_picard(
                lattice, run.market, tol=run.solver.tol, max_iter=run.solver.max_iter,
                growth_bound=run.solver.growth_bound, kappa=kappa,
            )
            report = bsde_mod.contraction_report(diag)
            summary.setdefault("initial_price", pic.prices.values[0][0].tolist())
            summary.setdefault("initial_certainty",
                               float(pic.certainty_equivalent.values[0][0]))
            summary["picard"] = diag.to_dict()
            summary["contraction_report"] = report.to_dict()
            if diag_path:
                rows = []
                for i, dist in enumerate(diag.distances):
                    ratio = diag.ratios[i - 1] if 0 < i <= len(diag.ratios) else np.nan
                    rows.append([i + 1, dist, ratio, diag.iterate_norms[i]])
                _write_csv(diag_path, ["iteration", "distance", "ratio", "iterate_bmo"],
                           rows)
        if method == "both":
            gap = max(
                float(np.max(np.abs(a - b)))
                for a, b in zip(exp.scaled_price.values, pic.scaled_price.values)
            )
            summary["max_node_discrepancy"] = gap
    except (NumericalError, ExponentialGuardError) as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)
    validate_summary(summary)
    _write_json(out_path, summary)
    if dump_path or run.output.dump_nodes:
        chosen = exp if method in ("explicit", "both") else pic
        try:
            assembled = bsde_mod.assemble(chosen)
        except ExponentialGuardError:
            assembled = None
        _write_csv(dump_path or out_path + ".nodes.csv",
                   chosen.node_header(), chosen.node_rows(assembled))
    if "picard" in summary:
        click.echo(f"bsde[{method}]: converged={summary['picard']['converged']} "
                   f"iterations={summary['picard']['iterations']}")
    else:
        click.echo(f"bsde[{method}]: residual={summary['residual_explicit']:.3e}")


@main.command("norms")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_norms(config_path, out_path):
    """Norms of the configured inputs and of the priced solution."""
    run = _load(config_path)
    lattice = _build(run)
    try:
        sol = price_equilibrium(lattice, run.market)
    except (NumericalError, ExponentialGuardError) as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)
    doc = {
        "command": "norms",
        "initial_price": sol.initial_price.tolist(),
        "initial_certainty": sol.initial_certainty,
        "norms": _instance_norms(run, lattice),
        "volatility_bmo": h_bmo_norm(sol.volatility).value,
        "mpr_bmo": h_bmo_norm(sol.market_price_of_risk).value,
        "value_integrand_bmo": h_bmo_norm(sol.value_integrand).value,
        "price_integrand_bmo": h_bmo_norm(sol.price_integrand).value,
        "demand_sup_node": list(sup_norm(sol.gamma).achieving_node),
        "kappa_empirical": measure_kappa(lattice),
    }
    validate_summary(doc)
    _write_json(out_path, doc)
    click.echo(f"norms: smallness_product={doc['norms']['smallness_product']:.6g}")


def _run_suite(run: RunConfig, lattice) -> list:
    suite = run.verify.suite
    reports = []
    need_solution = suite in ("all", "apriori", "martingale", "optimality",
                              "localization")
    sol = price_equilibrium(lattice, run.market) if need_solution else None
    if suite in ("all", "martingale"):
        reports.append(verify_mod.check_R_nonneg(sol))
        reports.append(verify_mod.check_equilibrium_martingales(sol))
    if suite in ("all", "apriori"):
        reports.append(verify_mod.check_apriori(sol))
        reports.append(verify_mod.check_supermartingale_V(sol))
    if suite in ("all", "optimality"):
        reports.append(verify_mod.check_optimality(
            sol, num_random=run.verify.competitors, epsilon=run.verify.epsilon,
            seed=run.verify.seed))
    if suite in ("all", "homogeneity"):
        reports.append(verify_mod.check_homogeneity(lattice, run.market))
    if suite in ("all", "localization"):
        tau = hitting_time_tau(lattice, 0.0,
                               from_step=min(1, lattice.num_steps - 1))
        reports.append(verify_mod.check_localization(sol, tau))
    if suite == "all":
        kappa = run.solver.kappa if run.solver.kappa is not None else measure_kappa(lattice)
        _, diag = bsde_mod.solve_picard(
            lattice, run.market, tol=run.solver.tol,
            max_iter=run.solver.max_iter, kappa=kappa)
        reports.append(verify_mod.check_norm_bounds(sol, diag))
    if suite in ("all", "counterexample"):
        reports.append(verify_mod.check_F_identity(seed=run.verify.seed))
        reports.append(verify_mod.run_counterexample(
            n_list=run.verify.counterexample_steps, kappa=run.solver.kappa))
    return reports


@main.command("verify")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--suite", default=None,
              type=click.Choice(["all", "apriori", "martingale", "homogeneity",
                                 "optimality", "localization", "counterexample"]),
              help="Override the suite from the config.")
def cmd_verify(config_path, out_path, suite):
    """Run the verification suite; exit 1 if any hard gate fails."""
    run = _load(config_path)
    if suite:
        run.verify.suite = suite
    lattice = _build(run)
    try:
        reports = _run_suite(run, lattice)
    except (NumericalError, ExponentialGuardError) as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)
    doc = {
        "command": "verify",
        "suite": run.verify.suite,
        "checks": [r.to_dict() for r in reports],
        "hard_gates_pass": all(r.status != "fail" for r in reports),
    }
    _write_json(out_path, doc)
    for r in reports:
        click.echo(f"{r.name}: {r.status}")
    if not doc["hard_gates_pass"]:
        sys.exit(EXIT_VERIFY)


@main.command("sweep")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--param", required=True,
              type=click.Choice(["risk_aversion", "demand_scale", "dividend_scale",
                                 "num_steps"]))
@click.option("--from", "start", required=True, type=float)
@click.option("--to", "stop", required=True, type=float)
@click.option("--points", required=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_sweep(config_path, param, start, stop, points, out_path):
    """Sweep one parameter; emit smallness product and convergence columns."""
    run = _load(config_path)
    if points < 1:
        click.echo("config error: --points must be >= 1", err=True)
        sys.exit(EXIT_CONFIG)
    if param == "num_steps":
        values = np.unique(np.linspace(start, stop, points).astype(int))
        values = values[values >= 1].astype(float)
    else:
        values = np.linspace(start, stop, points)
    rows = []
    try:
        for val in values:
            market = run.market
            lattice = build_lattice(
                int(val) if param == "num_steps" else market.num_steps,
                market.horizon)
            gamma, gamma_sup, psi, _ = evaluate_market(
                market if param != "num_steps" else
                _with_steps(market, int(val)), lattice)
            a = market.risk_aversion
            if param == "risk_aversion":
                a = float(val)
            elif param == "demand_scale":
                gamma = gamma.scaled(float(val))
                gamma_sup *= abs(float(val))
            elif param == "dividend_scale":
                psi = psi * float(val)
            sol = price_raw(lattice, a, gamma, psi)
            kappa = run.solver.kappa if run.solver.kappa is not None else measure_kappa(lattice)
            table_cfg = _as_table_config(market, lattice, a, gamma, psi)
            _, diag = bsde_mod.solve_picard(
                lattice, table_cfg, tol=run.solver.tol,
                max_iter=run.solver.max_iter, kappa=kappa)
            centered = psi - psi.mean(axis=0)
            psi_bmo = bmo_norm_rv(centered, lattice).value
            rows.append([
                float(val),
                a * gamma_sup * psi_bmo,
                diag.converged,
                diag.iterations,
                diag.ratios[-1] if diag.ratios else np.nan,
                h_bmo_norm(sol.volatility).value,
                h_bmo_norm(sol.market_price_of_risk).value,
            ])
    except (NumericalError, ExponentialGuardError) as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)
    _write_csv(out_path,
               ["param_value", "smallness_product", "converged", "iterations",
                "final_ratio", "volatility_bmo", "mpr_bmo"],
               rows)
    click.echo(f"sweep[{param}]: {len(rows)} points -> {out_path}")


def _with_steps(market, num_steps):
    from dataclasses import replace
    return replace(market, num_steps=num_steps)


def _as_table_config(market, lattice, a, gamma, psi):
    from .scenario import MarketConfig, TableDemand, TableDividend
    return MarketConfig(
        risk_aversion=a,
        num_stocks=market.num_stocks,
        demand=TableDemand(gamma.values),
        dividend=TableDividend(psi),
        num_steps=lattice.num_steps,
        horizon=lattice.horizon,
    )


if __name__ == "__main__":
    main()

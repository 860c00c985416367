"""Command-line interface: config parsing, dispatch, artifact emission.

Subcommands: simulate, rates, partition-solve, equilibrium, merton,
verify.  Each run writes its artifacts into one output directory plus a
manifest listing every file with its SHA-256; identical config and seed
produce byte-identical artifacts.  A one-line JSON summary goes to
stdout; structured errors go to stderr as JSON with exit codes 2
(config), 3 (numeric), 4 (non-convergence).
"""

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import merton as merton_mod
from .config import parse_config
from .costs import anchored_minimizer_policy, spike_ladder
from .equilibrium import residual as equilibrium_residual
from .equilibrium import solve_equilibrium
from .errors import ConfigError, SwitchctlError
from .expressions import CoefficientExpression
from .fields import time_grid
from .models import (GEOMETRY_PRESETS, MODEL_PRESETS,
                     merton_equilibrium_boundary, merton_partition_boundary,
                     uniform_mark_density)
from .partition import Partition, run_cycles
from .sde import ControlledDynamics, estimate_transition_rate, simulate_path
from .switching import LevyMeasure, RegimeGeometry, rate_matrix

SUBCOMMANDS = ("simulate", "rates", "partition-solve", "equilibrium",
               "merton", "verify")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="switchctl",
        description="time-inconsistent control of regime-switching diffusions")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("config", help="path to the run configuration file")
    parser.add_argument("--dry-run", action="store_true",
                        help="validate the config and print the plan only")
    parser.add_argument("--out", default=None, help="output directory override")
    args = parser.parse_args(argv)
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        _fail(ConfigError(f"cannot read config: {exc}"))
        return 2
    try:
        config = parse_config(text)
        outdir = _output_dir(config, args.out)
        workers = _workers(config)
        runner = _RUNNERS[args.subcommand]
        if args.dry_run:
            plan = {"subcommand": args.subcommand, "output": outdir,
                    "workers": workers,
                    "artifacts": runner(config, outdir, workers, plan_only=True)}
            print(json.dumps(plan, sort_keys=True))
            return 0
        os.makedirs(outdir, exist_ok=True)
        summary = runner(config, outdir, workers, plan_only=False)
        summary.update({"subcommand": args.subcommand, "output": outdir})
        print(json.dumps(summary, sort_keys=True, default=float))
        return 0
    except SwitchctlError as exc:
        _fail(exc)
        return exc.exit_code
    except Exception as exc:  # unexpected failures map to numeric errors
        _fail(exc, code=3)
        return 3


def _fail(exc, code=None):
    payload = {"error": type(exc).__name__, "message": str(exc),
               "exit_code": code if code is not None else
               getattr(exc, "exit_code", 3)}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def _output_dir(config, override):
    if override:
        return override
    env = os.environ.get("SWITCHCTL_OUTDIR")
    if env:
        return env
    return config.get("output", "directory")


def _workers(config):
    env = os.environ.get("SWITCHCTL_WORKERS")
    if env:
        return max(1, int(env))
    return config.get("run", "workers")


# ---------------------------------------------------------------------------
# artifact plumbing

class _Artifacts:
    def __init__(self, outdir):
        self.outdir = outdir
        self.records = []

    def path(self, name):
        return os.path.join(self.outdir, name)

    def add(self, name):
        path = self.path(name)
        digest = hashlib.sha256()
        with open(path, "rb") as fh:
            data = fh.read()
        digest.update(data)
        self.records.append({"name": name, "bytes": len(data),
                             "sha256": digest.hexdigest()})

    def write_json(self, name, payload):
        with open(self.path(name), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload, fh, sort_keys=True, default=float)
            fh.write("\n")
        self.add(name)

    def write_jsonl(self, name, rows):
        with open(self.path(name), "w", encoding="utf-8", newline="\n") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True, default=float))
                fh.write("\n")
        self.add(name)

    def finish(self):
        manifest = {"artifacts": sorted(self.records, key=lambda r: r["name"])}
        with open(self.path("manifest.json"), "w", encoding="utf-8",
                  newline="\n") as fh:
            json.dump(manifest, fh, sort_keys=True)
            fh.write("\n")
        return manifest


def _write_field(art, field, stem, formats):
    names = []
    if "csv" in formats:
        field.to_csv(art.path(f"{stem}.csv"))
        art.add(f"{stem}.csv")
        names.append(f"{stem}.csv")
    if "bin" in formats or "binary" in formats:
        field.to_binary(art.path(f"{stem}.bin"))
        art.add(f"{stem}.bin")
        names.append(f"{stem}.bin")
    return names


# ---------------------------------------------------------------------------
# model construction from config

def _geometry_from_config(config):
    model_cfg = config["model"]
    preset = model_cfg.get("geometry")
    if preset is not None:
        return GEOMETRY_PRESETS[preset](), uniform_mark_density(model_cfg["beta0"])
    m = model_cfg["regimes"]
    rows = []
    for i in range(1, m + 1):
        exprs = model_cfg.get(f"beta_{i}")
        if exprs is None:
            raise ConfigError(f"[model] beta_{i}: required for {m} regimes "
                              f"(or set 'geometry' to a preset)")
        if len(exprs) != m + 1:
            raise ConfigError(f"[model] beta_{i}: needs {m + 1} entries")
        rows.append([_expr_of_x(e) for e in exprs])
    geometry = RegimeGeometry(rows, beta0=model_cfg["beta0"])
    density_expr = model_cfg.get("density")
    if density_expr is None:
        levy = uniform_mark_density(model_cfg["beta0"])
    else:
        levy = LevyMeasure(lambda th: np.broadcast_to(
            np.asarray(density_expr(x=np.asarray(th, dtype=float)), dtype=float),
            np.asarray(th, dtype=float).shape), model_cfg["beta0"])
    return geometry, levy


def _expr_of_x(expr):
    return lambda x: np.broadcast_to(
        np.asarray(expr(x=np.asarray(x, dtype=float)), dtype=float),
        np.asarray(x, dtype=float).shape)


def _dynamics_from_config(config):
    model_cfg = config["model"]
    drift = model_cfg.get("drift") or CoefficientExpression("0")
    sigma = model_cfg.get("sigma") or CoefficientExpression("0")
    m = model_cfg["regimes"]

    def make(expr):
        def fn(s, x, i, u):
            x = np.asarray(x, dtype=float)
            out = expr(s=s, t=s, x=x, u=u[:, 0] if u.ndim > 1 else u)
            return np.broadcast_to(np.asarray(out, dtype=float), x.shape)
        return fn

    return ControlledDynamics(drift=make(drift), diffusion=make(sigma), m=m)


def _model_from_config(config):
    preset = config.get("model", "preset")
    model = MODEL_PRESETS[preset]()
    x_min = config.get("grid", "x_min")
    x_max = config.get("grid", "x_max")
    if x_min is not None and x_max is not None:
        model.x_domain = (x_min, x_max)
    return model


def _grids(config, model):
    n_x = config.get("grid", "n_x")
    grid = model.default_grid(n_x)
    grid.buffer_frac = config.get("grid", "buffer")
    t_max = min(config.get("grid", "t_max"), model.T)
    times = time_grid(0.0, t_max, config.get("grid", "n_t"))
    return grid, times


def _merton_boundary(model, times, grid, tol):
    if model.spec is None:
        return None, None
    phi = merton_mod.solve_equilibrium_ode(model.spec, times, tol=min(tol, 1e-12))
    return phi, merton_equilibrium_boundary(model, phi, grid)


# ---------------------------------------------------------------------------
# subcommands

def _run_simulate(config, outdir, workers, plan_only):
    planned = ["path.csv", "jumps.json", "manifest.json"]
    if plan_only:
        return planned
    geometry, levy = _geometry_from_config(config)
    dynamics = _dynamics_from_config(config)
    path = simulate_path(
        dynamics, geometry, levy,
        (0.0, config.get("model", "x0"), config.get("model", "i0")),
        None, h=config.get("solver", "h"), t_end=config.get("grid", "t_max"),
        seed=config.get("run", "seed"))
    art = _Artifacts(outdir)
    path.to_csv(art.path("path.csv"))
    art.add("path.csv")
    art.write_json("jumps.json", path.jump_log())
    art.finish()
    return {"nodes": len(path.times), "jumps": len(path.jumps)}


def _run_rates(config, outdir, workers, plan_only):
    planned = ["rates.json", "manifest.json"]
    if plan_only:
        return planned
    geometry, levy = _geometry_from_config(config)
    dynamics = _dynamics_from_config(config)
    xs = config.get("solver", "rate_states")
    ds = config.get("solver", "ds")
    n_paths = config.get("solver", "n_paths")
    seed = config.get("run", "seed")
    m = geometry.m
    cells = [(x, i, j) for x in xs for i in range(1, m + 1)
             for j in range(1, m + 1) if i != j]

    def work(cell_index):
        x, i, j = cells[cell_index]
        q = rate_matrix(geometry, levy, x)[i - 1, j - 1]
        est = estimate_transition_rate(dynamics, geometry, levy, x, i, j, ds,
                                       n_paths, seed + cell_index, q_theory=q)
        return {"x": x, "i": i, "j": j, "q_theory": q,
                "q_empirical": est.rate, "se": est.se,
                "anomaly": est.anomaly}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            table = list(pool.map(work, range(len(cells))))
    else:
        table = [work(k) for k in range(len(cells))]
    art = _Artifacts(outdir)
    art.write_json("rates.json", table)
    art.finish()
    return {"cells": len(table)}


def _run_partition_solve(config, outdir, workers, plan_only):
    formats = config.get("output", "formats")
    planned = ["value.csv", "strategy.csv", "convergence.json", "manifest.json"]
    if plan_only:
        return planned
    model = _model_from_config(config)
    grid, times = _grids(config, model)
    knots = config.get("solver", "knots")
    if knots is not None:
        parts = [Partition(np.asarray(knots))]
    else:
        parts = [Partition.uniform(times[-1], n)
                 for n in config.get("solver", "partitions")]

    def boundary_for(part):
        if model.spec is None:
            return None
        mirror = merton_mod.partition_phi(model.spec, part.knots, times)
        return merton_partition_boundary(model, mirror, grid)

    table = []
    prev = None
    final = None
    for part in parts:
        sol = run_cycles(model, part, grid, times, boundary=boundary_for(part))
        row = {"mesh": part.mesh(), "n_players": part.n_players,
               "sup_diff_V": None, "sup_diff_Psi": None}
        if prev is not None:
            interior = grid.interior_mask()
            row["sup_diff_V"] = sol.value.sup_diff(prev.value, interior)
            row["sup_diff_Psi"] = sol.strategy.sup_diff(prev.strategy, interior)
        table.append(row)
        prev = sol
        final = sol
    art = _Artifacts(outdir)
    _write_field(art, final.value, "value", formats)
    final.strategy.to_csv(art.path("strategy.csv"))
    art.add("strategy.csv")
    art.write_json("convergence.json", table)
    art.finish()
    return {"partitions": len(parts), "finest_mesh": parts[-1].mesh()}


def _run_equilibrium(config, outdir, workers, plan_only):
    formats = config.get("output", "formats")
    planned = ["value.csv", "strategy.csv", "residual_log.jsonl", "manifest.json"]
    if plan_only:
        return planned
    model = _model_from_config(config)
    grid, times = _grids(config, model)
    tol = config.get("solver", "tol")
    _phi, boundary = _merton_boundary(model, times, grid, tol)
    sol = solve_equilibrium(model, grid, times, tol=tol,
                            max_sweeps=config.get("solver", "max_sweeps"),
                            slab=config.get("solver", "slab"),
                            boundary=boundary)
    final_res = equilibrium_residual(model, sol)
    rows = []
    for entry in sol.log:
        row = dict(entry)
        row.setdefault("residual", None)
        rows.append(row)
    rows.append({"sweep": None, "diag_change": None, "residual": final_res})
    art = _Artifacts(outdir)
    _write_field(art, sol.value, "value", formats)
    sol.strategy.to_csv(art.path("strategy.csv"))
    art.add("strategy.csv")
    art.write_jsonl("residual_log.jsonl", rows)
    art.finish()
    return {"sweeps": len([e for e in sol.log if "sweep" in e]),
            "final_residual": final_res}


def _run_merton(config, outdir, workers, plan_only):
    planned = ["phi.csv", "strategy.csv", "comparison.json", "manifest.json"]
    if plan_only:
        return planned
    model = _model_from_config(config)
    if model.spec is None:
        raise ConfigError("the merton subcommand needs a merton-* preset")
    spec = model.spec
    _grid, times = _grids(config, model)
    variant = config.get("solver", "variant")
    tol = config.get("solver", "tol")
    anchor = config.get("solver", "anchor")
    phi_tc = merton_mod.solve_time_consistent(spec, times)
    art = _Artifacts(outdir)
    report = {"variant": variant}
    if variant == "tc":
        _write_phi_table(art, "phi.csv", times, {0.0: phi_tc})
        rates = _strategy_rates(spec, times, phi_tc,
                                lambda s: float(spec.g(s, s)))
    elif variant == "pre":
        phi_pre = merton_mod.solve_precommitted(spec, anchor, times)
        _write_phi_table(art, "phi.csv", times, {anchor: phi_pre})
        rates = _strategy_rates(spec, times, phi_pre,
                                lambda s: float(spec.g(anchor, s)))
        report["max_gap_pre_tc"] = float(np.nanmax(np.abs(phi_pre - phi_tc)))
    else:
        sol = merton_mod.solve_equilibrium_ode(spec, times, tol=min(tol, 1e-12))
        _write_phi_table(art, "phi.csv", times,
                         {float(times[k]): sol.eq[k] for k in range(len(times))})
        rates = _strategy_rates(spec, times, sol.eq_diag,
                                lambda s: float(spec.g(s, s)))
        report["max_gap_eq_tc"] = float(np.nanmax(np.abs(sol.eq_diag - phi_tc)))
        report["sweeps"] = len(sol.iterations)
        report["final_change"] = sol.iterations[-1]
    with open(art.path("strategy.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("s,i,invest_fraction,consume_rate\n")
        for k, s in enumerate(times):
            for i in range(1, spec.m + 1):
                if np.isnan(rates[1][k, i - 1]):
                    continue
                fh.write(f"{float(s)!r},{i},{float(rates[0][i - 1])!r},{float(rates[1][k, i - 1])!r}\n")
    art.add("strategy.csv")
    art.write_json("comparison.json", report)
    art.finish()
    return report


def _write_phi_table(art, name, times, rows_by_tau):
    with open(art.path(name), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("tau,s,i,phi\n")
        for tau in sorted(rows_by_tau):
            rows = rows_by_tau[tau]
            for k, s in enumerate(times):
                for i in range(rows.shape[1]):
                    val = rows[k, i]
                    if np.isnan(val):
                        continue
                    fh.write(f"{float(tau)!r},{float(s)!r},{i + 1},{float(val)!r}\n")
    art.add(name)


def _strategy_rates(spec, times, phi_rows, g_of_s):
    frac = spec.investment_fraction()
    gam = spec.gamma
    rates = np.full_like(phi_rows, np.nan)
    for k, s in enumerate(times):
        for i in range(spec.m):
            if np.isnan(phi_rows[k, i]):
                continue
            rates[k, i] = (g_of_s(float(s)) / phi_rows[k, i]) ** (1 / (1 - gam))
    return frac, rates


def _run_verify(config, outdir, workers, plan_only):
    planned = ["verify.json", "gain.csv", "manifest.json"]
    if plan_only:
        return planned
    model = _model_from_config(config)
    grid, times = _grids(config, model)
    tol = config.get("solver", "tol")
    _phi, boundary = _merton_boundary(model, times, grid, tol)
    sol = solve_equilibrium(model, grid, times, tol=tol,
                            max_sweeps=config.get("solver", "max_sweeps"),
                            slab=config.get("solver", "slab"),
                            boundary=boundary)
    t0 = config.get("solver", "spike_anchor")
    epsilons = config.get("solver", "epsilons")
    policy = anchored_minimizer_policy(model, sol, t0)
    ladder = spike_ladder(model, sol, t0, epsilons, policy, boundary=boundary)
    art = _Artifacts(outdir)
    art.write_json("verify.json", {
        "epsilon": ladder["epsilons"], "min_gain": ladder["min_gains"],
        "intercept_estimate": ladder["intercept"], "anchor": t0})
    gain = ladder["gains"][-1]
    with open(art.path("gain.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x,i,gain\n")
        for j, x in enumerate(grid.x):
            for i in range(model.m):
                fh.write(f"{float(x)!r},{i + 1},{float(gain.gain[j, i])!r}\n")
    art.add("gain.csv")
    art.finish()
    return {"min_gain": ladder["min_gains"][-1],
            "intercept_estimate": ladder["intercept"]}


_RUNNERS = {
    "simulate": _run_simulate,
    "rates": _run_rates,
    "partition-solve": _run_partition_solve,
    "equilibrium": _run_equilibrium,
    "merton": _run_merton,
    "verify": _run_verify,
}


if __name__ == "__main__":
    sys.exit(main())

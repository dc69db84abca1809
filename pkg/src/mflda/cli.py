"""Command-line entry point: ``mflda <subcommand> ...``.

Every subcommand writes its output plus a ``<output>.manifest.json`` run
manifest, and exits 0 only if all of its asserted checks pass.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .dynamics import (EvolverConfig, ParticleEnsemble, evolve, initial_pair, run_particles)
from .equilibrium import (certify, equilibrium_from_dict, equilibrium_to_dict, solve_mne,
                          solve_mne_robust)
from .errors import MFLDAError, NotConverged
from .geometry import METRIC_COLUMNS, MetricSample, metric_sample
from .grid import Density, PeriodicGrid
from .harness import RunManifest, conservation_check, experiment_local_stability, fit_rate
from .payoff import DECOUPLED, Payoff
from .spectral import spectral_gap

log = logging.getLogger("mflda")

ROUTE_TOL = 1e-7


def _resolve(args, path):
    p = Path(path)
    if args.out_dir and not p.is_absolute():
        p = Path(args.out_dir) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _load_payoff(name) -> Payoff:
    if name == "decoupled":
        return DECOUPLED
    if name in ("zero", "flat"):
        return Payoff.zero()
    return Payoff.from_json(name)


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, default=_json_default) + "\n", encoding="utf-8")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_manifest(out, manifest: RunManifest, t0):
    manifest.outputs.append(str(out))
    manifest.wall_clock = time.perf_counter() - t0
    _write_json(f"{out}.manifest.json", manifest.to_dict())


def _load_eq(path):
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return equilibrium_from_dict(data)


# -- subcommands -----------------------------------------------------------------------


def cmd_equilibrium(args) -> int:
    t0 = time.perf_counter()
    f = _load_payoff(args.payoff)
    grid = PeriodicGrid(args.grid)
    try:
        eq = solve_mne(f, grid, damping=args.damping, tol=args.tol, max_iter=args.max_iter)
    except NotConverged as exc:
        log.warning("%s; retrying with stronger damping", exc)
        eq = solve_mne_robust(f, grid, tol=args.tol)
    out = _resolve(args, args.out)
    data = equilibrium_to_dict(eq, f)
    ok = True
    try:
        data["certificate"] = certify(eq, f, args.tol)
    except MFLDAError as exc:
        data["certificate"] = {"error": str(exc)}
        ok = False
    _write_json(out, data)
    _write_manifest(out, RunManifest("equilibrium", f.to_dict(), args.grid, {"tol": args.tol},
                                     parameters={"damping": args.damping, "max_iter": args.max_iter}), t0)
    log.info("equilibrium: %d iterations, certified=%s", eq.iterations, ok)
    return 0 if ok else 1


def cmd_gap(args) -> int:
    t0 = time.perf_counter()
    eq, f = _load_eq(args.eq)
    res = spectral_gap(eq, f)
    d = res.to_dict()
    rel = [abs(res.lambda_x - res.lambda_x_rayleigh) / res.lambda_x_rayleigh,
           abs(res.lambda_y - res.lambda_y_rayleigh) / res.lambda_y_rayleigh]
    d["route_rel_diff"] = rel
    d["checks"] = {"route_agreement": max(rel) <= ROUTE_TOL,
                   "holley_stroock": res.lambda_gap >= res.holley_stroock_bound}
    out = _resolve(args, args.out)
    _write_json(out, d)
    _write_manifest(out, RunManifest("gap", f.to_dict(), eq.grid.n_points, {"route": ROUTE_TOL}), t0)
    print(f"lambda_gap = {res.lambda_gap:.10g}")
    return 0 if all(d["checks"].values()) else 1


def write_traj_csv(path, rec):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "mu", "nu"])
        for t, m, n in zip(rec.times, rec.mu_snapshots, rec.nu_snapshots):
            for x, a, b in zip(m.grid.nodes, m.values, n.values):
                w.writerow([repr(t), repr(float(x)), repr(float(a)), repr(float(b))])


def read_traj_csv(path):
    """Returns ``(times, mu_list, nu_list)`` from a long-format trajectory file."""
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["t", "x", "mu", "nu"]:
            raise ValueError(f"{path}: expected header 't,x,mu,nu'")
        for r in reader:
            rows.setdefault(float(r["t"]), []).append((float(r["mu"]), float(r["nu"])))
    times = sorted(rows)
    mus, nus = [], []
    for t in times:
        vals = np.array(rows[t])
        grid = PeriodicGrid(len(vals))
        mus.append(Density.from_values(grid, vals[:, 0]))
        nus.append(Density.from_values(grid, vals[:, 1]))
    return times, mus, nus


def cmd_evolve(args) -> int:
    t0 = time.perf_counter()
    eq = None
    f = _load_payoff(args.payoff) if args.payoff else None
    if args.eq:
        eq, f_eq = _load_eq(args.eq)
        f = f or f_eq
    if f is None:
        raise SystemExit("evolve needs --payoff or --eq")
    grid = eq.grid if eq is not None else PeriodicGrid(args.grid)
    init = json.loads(Path(args.init).read_text(encoding="utf-8")) if args.init else {"kind": "uniform"}
    eig = None
    if init.get("mode") == "eigen":
        res = spectral_gap(eq, f)
        eig = (res.eigenfunction_x.values, res.eigenfunction_y.values)
    mu0, nu0 = initial_pair(init, grid, f, eq, eig)
    cfg = EvolverConfig(args.dt, args.t_end, args.stride)
    rec = evolve(mu0, nu0, f, cfg)
    out = _resolve(args, args.out)
    write_traj_csv(out, rec)
    check = conservation_check(rec)
    m = RunManifest("evolve", f.to_dict(), grid.n_points, {"mass_defect": 1e-12, "min_density": -1e-12},
                    parameters={"init": init, "dt": args.dt, "t_end": args.t_end, "stride": args.stride,
                                "conservation": check})
    _write_manifest(out, m, t0)
    return 0 if check["pass"] else 1


def cmd_particles(args) -> int:
    t0 = time.perf_counter()
    f = _load_payoff(args.payoff)
    grid = PeriodicGrid(args.grid)
    if args.from_point:
        ens = ParticleEnsemble.at_point(args.n, seed=args.seed, dt=args.dt)
    else:
        u = Density.uniform(grid)
        ens = ParticleEnsemble.sample(u, u, args.n, seed=args.seed, dt=args.dt)
    ens = run_particles(ens, f, grid, args.t_end, noise=not args.no_noise, drift=args.drift,
                        interpolation=args.interpolation)
    out = _resolve(args, args.out)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["particle", "x", "y", "disp_x", "disp_y"])
        for i in range(ens.n_particles):
            w.writerow([i, repr(float(ens.positions_x[i])), repr(float(ens.positions_y[i])),
                        repr(float(ens.displacement_x[i])), repr(float(ens.displacement_y[i]))])
    m = RunManifest("particles", f.to_dict(), args.grid, seeds=[args.seed],
                    parameters={"n": args.n, "dt": args.dt, "t_end": args.t_end, "noise": not args.no_noise,
                                "drift": args.drift, "interpolation": args.interpolation})
    _write_manifest(out, m, t0)
    return 0


def write_metrics_csv(path, samples):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for s in samples:
            d = s.to_dict()
            w.writerow([repr(float(d[c])) for c in METRIC_COLUMNS])


def read_metrics_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [MetricSample(**{c: float(r[c]) for c in METRIC_COLUMNS}) for r in reader]


def cmd_metrics(args) -> int:
    t0 = time.perf_counter()
    eq, f = _load_eq(args.eq)
    times, mus, nus = read_traj_csv(args.traj)
    samples = [metric_sample(t, m, n, eq, f) for t, m, n in zip(times, mus, nus)]
    out = _resolve(args, args.out)
    write_metrics_csv(out, samples)
    chain = all(s.ni >= s.kl_mu + s.kl_nu - 1e-9 for s in samples)
    _write_manifest(out, RunManifest("metrics", f.to_dict(), eq.grid.n_points, {"chain": 1e-9},
                                     parameters={"traj": str(args.traj), "chain_pass": chain}), t0)
    return 0 if chain else 1


def cmd_fit_rate(args) -> int:
    t0 = time.perf_counter()
    samples = read_metrics_csv(args.metrics)
    window = None if args.t_a is None and args.t_b is None else (
        0.1 if args.t_a is None else args.t_a, samples[-1].t if args.t_b is None else args.t_b)
    fit = fit_rate(samples, window)
    d = fit.to_dict()
    ok = fit.r_squared >= args.min_r2
    if args.gap:
        lam = json.loads(Path(args.gap).read_text(encoding="utf-8"))["lambda_gap"]
        d["lambda_gap"] = lam
        d["ratio"] = fit.lambda_hat / lam
        ok &= abs(d["ratio"] - 1.0) <= args.rel_tol
    d["pass"] = bool(ok)
    out = _resolve(args, args.out)
    _write_json(out, d)
    _write_manifest(out, RunManifest("fit-rate", {}, 0, {"min_r2": args.min_r2, "rel_tol": args.rel_tol},
                                     parameters={"metrics": str(args.metrics)}), t0)
    print(f"lambda_hat = {fit.lambda_hat:.6g}  r2 = {fit.r_squared:.6f}")
    return 0 if ok else 1


def cmd_report(args) -> int:
    f = _load_payoff(args.payoff)
    rep = experiment_local_stability(f, args.grid, tuple(args.eps), args.dt, args.t_end, args.stride,
                                     args.n_random, args.seed, workers=args.threads)
    out = _resolve(args, args.out)
    rep["manifest"]["outputs"].append(str(out))
    _write_json(out, rep)
    _write_json(f"{out}.manifest.json", rep["manifest"])
    print(f"report: {'PASS' if rep['pass'] else 'FAIL'}")
    return 0 if rep["pass"] else 1


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mflda", description=__doc__.splitlines()[0])
    p.add_argument("--grid", type=int, default=256, help="grid size N (default 256)")
    p.add_argument("--out-dir", default=None, help="directory for relative output paths")
    p.add_argument("--threads", type=int, default=1, help="worker threads for experiment cells")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("equilibrium", help="solve and certify the equilibrium")
    s.add_argument("--payoff", required=True, help="payoff JSON, or 'decoupled' / 'zero'")
    s.add_argument("--tol", type=float, default=1e-12)
    s.add_argument("--damping", type=float, default=0.5)
    s.add_argument("--max-iter", type=int, default=100_000)
    s.add_argument("--out", default="eq.json")
    s.set_defaults(func=cmd_equilibrium)

    s = sub.add_parser("gap", help="spectral gap at a stored equilibrium")
    s.add_argument("--eq", required=True)
    s.add_argument("--out", default="gap.json")
    s.set_defaults(func=cmd_gap)

    s = sub.add_parser("evolve", help="integrate the PDE")
    s.add_argument("--eq")
    s.add_argument("--payoff")
    s.add_argument("--init", help="initialization JSON")
    s.add_argument("--dt", type=float, default=1e-4)
    s.add_argument("--t-end", type=float, default=1.0)
    s.add_argument("--stride", type=int, default=100)
    s.add_argument("--out", default="traj.csv")
    s.set_defaults(func=cmd_evolve)

    s = sub.add_parser("particles", help="run the particle system")
    s.add_argument("--payoff", required=True)
    s.add_argument("--n", type=int, default=10_000)
    s.add_argument("--dt", type=float, default=1e-3)
    s.add_argument("--t-end", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--drift", choices=("deposit", "moments"), default="deposit")
    s.add_argument("--interpolation", choices=("linear", "cubic"), default="linear")
    s.add_argument("--no-noise", action="store_true", help="deterministic drift only")
    s.add_argument("--from-point", action="store_true", help="start all particles at 0")
    s.add_argument("--out", default="particles.csv")
    s.set_defaults(func=cmd_particles)

    s = sub.add_parser("metrics", help="W2/KL/NI along a trajectory")
    s.add_argument("--traj", required=True)
    s.add_argument("--eq", required=True)
    s.add_argument("--out", default="metrics.csv")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("fit-rate", help="fit the exponential decay rate of E")
    s.add_argument("--metrics", required=True)
    s.add_argument("--t-a", type=float)
    s.add_argument("--t-b", type=float)
    s.add_argument("--gap", help="gap.json to compare against")
    s.add_argument("--min-r2", type=float, default=0.999)
    s.add_argument("--rel-tol", type=float, default=0.1)
    s.add_argument("--out", default="fit.json")
    s.set_defaults(func=cmd_fit_rate)

    s = sub.add_parser("report", help="local-stability experiment with JSON report")
    s.add_argument("--payoff", required=True)
    s.add_argument("--eps", type=float, nargs="+", default=[0.01])
    s.add_argument("--dt", type=float, default=1e-4)
    s.add_argument("--t-end", type=float, default=1.0)
    s.add_argument("--stride", type=int, default=100)
    s.add_argument("--n-random", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="report.json")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MFLDAError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: ``vgf-backstepping {plan,kernels,run,verify}``.

Exit codes: 0 success, 2 invalid input, missing capability or a failed
check, 3 numerical divergence of the plant, 64 usage error.  Settings come
from the TOML file given by ``--config`` (the shipped GaAs scenario when
omitted) and may be overridden with ``VGF_<SECTION>_<KEY>`` variables.
Lengths are given in mm and times in hours on the command line; everything
written to disk is SI.
"""
import argparse
import csv
import logging
import math
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import __version__
from .coefficients import CoefficientField
from .config import load_spec
from .controller import ControllerConfig
from .errors import DivergenceError, SimulationAbort, VGFError
from .kernel import build_kernel_bank, kernel_lookup, solve_kernel_midpoint, solve_kernel_successive
from .material import PHASES
from .reference import ReferenceField, melt_gradient
from .simulator import SimConfig, run_closed_loop
from .verify import INJECTIONS, run_checks

__all__ = ["main", "build_parser", "bank_times", "EXIT_OK", "EXIT_INVALID", "EXIT_DIVERGED",
           "EXIT_USAGE"]

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_DIVERGED = 3
EXIT_USAGE = 64

ORACLE_ORDERS = 24

log = logging.getLogger("vgf_backstepping")

PLOT_SCRIPT = '''"""Plot a closed-loop run written by vgf-backstepping (needs matplotlib)."""
import csv
import sys

import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "runlog.csv"
with open(path) as fh:
    rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
col = {k: [float(r[k]) for r in rows] for k in rows[0]}
hours = [t / 3600.0 for t in col["t"]]
fig, ax = plt.subplots(3, 1, sharex=True, figsize=(7, 8))
ax[0].plot(hours, [1e3 * d for d in col["dgamma"]])
ax[0].set_ylabel("interface error (mm)")
ax[1].semilogy(hours, col["l2_solid"], label="solid")
ax[1].semilogy(hours, col["l2_liquid"], label="liquid")
ax[1].set_ylabel("L2 temperature error")
ax[1].legend()
ax[2].plot(hours, col["q_solid"], label="solid")
ax[2].plot(hours, col["q_liquid"], label="liquid")
ax[2].set_ylabel("heater flux (W/m^2)")
ax[2].set_xlabel("time (h)")
ax[2].legend()
fig.tight_layout()
fig.savefig(path.rsplit(".", 1)[0] + ".png", dpi=150)
'''


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="vgf-backstepping",
                description="Backstepping tracking control of the two-phase Stefan problem.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="TOML experiment file (default: shipped GaAs scenario)")
    p.add_argument("--out", default="vgf_out", help="output directory (default: %(default)s)")
    p.add_argument("--threads", type=int, default=1, help="workers for kernel builds")
    p.add_argument("--check", action="store_true",
                   help="cross-check kernels against the successive approximations")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    plan = sub.add_parser("plan", help="reference trajectory and temperature field")
    plan.add_argument("--samples", type=int, default=101, help="rows of the flat output table")
    plan.add_argument("--snapshots", type=int, default=11, help="times of the reference field")

    kern = sub.add_parser("kernels", help="kernel banks of both phases")
    kern.add_argument("--check", action="store_true", default=argparse.SUPPRESS,
                      help="same as the global flag")
    kern.add_argument("--dump-every", type=int, default=0,
                      help="write every n-th time sample (default: about 9 samples)")

    run = sub.add_parser("run", help="closed-loop simulation")
    run.add_argument("--feedforward-only", action="store_true", help="apply the feedforward only")
    run.add_argument("--t-end", type=float, metavar="HOURS", help="end time in hours")
    run.add_argument("--dgamma0", type=float, metavar="MM", help="initial interface offset in mm")
    run.add_argument("--dgamma-dot0", type=float, metavar="MM_PER_H",
                     help="initial interface velocity offset in mm/h")

    ver = sub.add_parser("verify", help="reduced-scale self checks")
    ver.add_argument("--inject", choices=INJECTIONS, help=argparse.SUPPRESS)
    return p


def _header(fh, kind, spec):
    fh.write(f"# vgf-{kind} v1\n")
    fh.write(f"# material-hash {spec.material_hash()}\n")


def _r(v):
    return repr(float(v))


def bank_times(spec):
    """Sample times of the kernel banks, covering the trajectory and the run."""
    tr = spec.trajectory
    span = max(tr.duration, spec.simulation.t_end - tr.t0)
    return np.linspace(tr.t0, tr.t0 + span, spec.kernel.time_samples + 1)


def _reference(spec):
    return ReferenceField(spec.trajectory.build(), spec.material, spec.trajectory.order)


def cmd_plan(spec, args):
    ref = _reference(spec)
    traj, cfg = ref.traj, ref.cfg
    tr = spec.trajectory
    times = np.linspace(tr.t0, tr.t0 + tr.duration, max(args.samples, 2))
    path = os.path.join(args.out, "flat_output.csv")
    with open(path, "w", newline="") as fh:
        _header(fh, "flat-output", spec)
        w = csv.writer(fh)
        w.writerow(("t", "y1", "y2", "gamma_dot", "melt_gradient"))
        for t in times:
            y1, y2 = traj(t)
            v = traj.velocity(t)
            w.writerow((_r(t), _r(y1), _r(y2), _r(v), _r(melt_gradient(y1, v, cfg))))
    snaps = np.linspace(tr.t0, tr.t0 + tr.duration, max(args.snapshots, 2))
    s = np.linspace(0.0, 1.0, spec.simulation.nodes)
    heat, stefan = 0.0, 0.0
    rpath = os.path.join(args.out, "reference.csv")
    with open(rpath, "w", newline="") as fh:
        _header(fh, "reference", spec)
        w = csv.writer(fh)
        w.writerow(("t", "phase", "z", "T"))
        for t in snaps:
            gamma = ref.interface(t)
            for ph in PHASES:
                p = cfg.phase(ph)
                zt = p.orientation * cfg.phase_length(ph, gamma) * s
                T = ref.evaluate(ph, zt, t, check=False)
                pde, st = ref.residuals(ph, zt, t)
                heat = max(heat, float(np.max(np.abs(pde))))
                stefan = max(stefan, abs(float(st)))
                for z, val in zip(gamma + zt, T):
                    w.writerow((_r(t), ph, _r(z), _r(val)))
    y2 = [traj.position(times[0]), traj.position(times[-1])]
    print(f"interface: {y2[0]:.3f} m -> {y2[1]:.3f} m over {tr.duration / 3600:g} h")
    print(f"max residuals: heat equation {heat:.2e} K/s, Stefan condition {stefan:.2e} m/s")
    print(f"wrote {path} and {rpath}")
    return EXIT_OK


def _kernel_check(ref, spec, t):
    """Midpoint grids at N/2 and N against the oracle on a 2N grid at time ``t``."""
    kn, ct = spec.kernel, spec.controller
    extent = ref.cfg.extent
    n = kn.n_sigma
    sizes = (max(n // 2, 1), n)
    ok = True
    for ph in PHASES:
        c = CoefficientField(ref, ph, t, mu=ct.mu, n_time=n)
        # the oracle values settle long before all N time orders are used
        co = CoefficientField(ref, ph, t, mu=ct.mu, n_time=min(n, ORACLE_ORDERS))
        oracle, _ = solve_kernel_successive(co, extent, n_sigma=2 * n, zeta0_rule=kn.zeta0_rule)
        scale = float(np.nanmax(np.abs(oracle.values)))
        devs, bounds = [], []
        for m in sizes:
            g = solve_kernel_midpoint(c, extent / m, extent, scheme=kn.scheme,
                                      zeta0_rule=kn.zeta0_rule)
            x, xi, v = _grid_arrays(g)
            devs.append(float(np.max(np.abs(v - kernel_lookup(oracle, x, xi)))))
            bounds.append(g.delta * scale)
        order = math.log2(devs[0] / devs[1]) if devs[1] > 0 and devs[0] > 0 else float("nan")
        good = devs[1] <= bounds[1] and 0.8 <= order <= 1.5 if kn.scheme == "lower" \
            else devs[1] <= bounds[1] and order >= 0.8
        ok &= bool(good)
        print(f"check {ph} t={t:g}: deviation {devs[0]:.3e} (N={sizes[0]}), {devs[1]:.3e} "
              f"(N={sizes[1]}), bound C*delta*max|k| {bounds[1]:.3e} with C=1/m, "
              f"order {order:.2f}: {'PASS' if good else 'FAIL'}")
    return ok


def _grid_arrays(g):
    _, _, eta, sig, val = map(np.array, zip(*g.nodes()))
    return (eta + sig) / 2, (eta - sig) / 2, val


def cmd_kernels(spec, args):
    ref = _reference(spec)
    kn, ct = spec.kernel, spec.controller
    times = bank_times(spec)
    banks = {ph: build_kernel_bank(ref, ph, ct.mu, kn.n_sigma, times, scheme=kn.scheme,
                                   zeta0_rule=kn.zeta0_rule, threads=args.threads)
             for ph in PHASES}
    every = args.dump_every or max(1, kn.time_samples // 8)
    keep = list(range(0, times.size, every))
    path = os.path.join(args.out, "kernels.csv")
    with open(path, "w", newline="") as fh:
        _header(fh, "kernels", spec)
        w = csv.writer(fh)
        w.writerow(("t", "phase", "i", "j", "eta", "sigma", "value"))
        for k in keep:
            for ph in PHASES:
                g = banks[ph].grids[k]
                for i, j, eta, sigma, val in g.nodes():
                    w.writerow((_r(g.t), ph, i, j, _r(eta), _r(sigma), _r(val)))
    print(f"grid: N_sigma={kn.n_sigma}, delta={spec.material.extent / kn.n_sigma:.4g} m, "
          f"scheme={kn.scheme}, {times.size} time samples")
    for ph in PHASES:
        peak = max(float(np.nanmax(np.abs(g.values))) for g in banks[ph].grids)
        print(f"{ph}: max|k| {peak:.4e} 1/m^2")
    print(f"wrote {path} ({len(keep)} time samples)")
    if getattr(args, "check", False):
        if not _kernel_check(ref, spec, float(times[times.size // 2])):
            return EXIT_INVALID
    return EXIT_OK


def _sim_config(spec, args):
    sm = spec.simulation
    over = {}
    if args.t_end is not None:
        over["t_end"] = args.t_end * 3600.0
    if args.dgamma0 is not None:
        over["dgamma0"] = args.dgamma0 * 1e-3
    if args.dgamma_dot0 is not None:
        over["dgamma_dot0"] = args.dgamma_dot0 * 1e-3 / 3600.0
    if args.feedforward_only:
        over["feedforward_only"] = True
    sm = replace(sm, **over)
    sim = SimConfig(nodes=sm.nodes, dt=sm.dt, t_end=sm.t_end, dgamma0=sm.dgamma0,
                    dgamma_dot0=sm.dgamma_dot0, feedforward_only=sm.feedforward_only,
                    profile_every=sm.profile_every)
    return replace(spec, simulation=sm), sim


def _summary(runlog):
    dg = np.abs(runlog.column("dgamma"))
    print(f"steps: {len(runlog.rows) - 1}, final time {runlog.rows[-1][0] / 3600:.3f} h")
    print(f"|dgamma|: initial {1e3 * dg[0]:.4f} mm, max {1e3 * dg.max():.4f} mm, "
          f"final {1e3 * dg[-1]:.4f} mm")
    for ph in PHASES:
        l2 = runlog.column(f"l2_{ph}")
        peak = float(l2.max())
        factor = l2[-1] / peak if peak > 0 else 0.0
        print(f"{ph} L2 error: peak {peak:.4e}, final {l2[-1]:.4e}, final/peak {factor:.3e}")


def cmd_run(spec, args):
    spec, sim = _sim_config(spec, args)
    ref = _reference(spec)
    kn, ct = spec.kernel, spec.controller
    controller = None
    if not sim.feedforward_only:
        times = bank_times(spec)
        banks = {ph: build_kernel_bank(ref, ph, ct.mu, kn.n_sigma, times, scheme=kn.scheme,
                                       zeta0_rule=kn.zeta0_rule, threads=args.threads)
                 for ph in PHASES}
        controller = ControllerConfig(ref, banks, mu=ct.mu, nu=ct.nu, frame=ct.frame)
    runlog = run_closed_loop(ref, sim, controller)
    runlog.meta.update({"version": __version__, "config": spec.to_dict(),
                        "material_hash": spec.material_hash(), "aborted": runlog.aborted,
                        "mode": "feedforward" if controller is None else "feedback"})
    runlog.meta["sim"] = asdict(sim)
    path = os.path.join(args.out, "runlog.csv")
    runlog.write_csv(path, os.path.join(args.out, "runlog.json"))
    runlog.write_profiles(os.path.join(args.out, "profiles.csv"))
    with open(os.path.join(args.out, "plot_run.py"), "w") as fh:
        fh.write(PLOT_SCRIPT)
    print(f"mode: {runlog.meta['mode']}")
    _summary(runlog)
    print(f"wrote {path}")
    if runlog.aborted:
        print(f"run aborted: {runlog.aborted}", file=sys.stderr)
        kind = runlog.aborted.split(":", 1)[0]
        return EXIT_DIVERGED if kind in (SimulationAbort.__name__, DivergenceError.__name__) \
            else EXIT_INVALID
    return EXIT_OK


def cmd_verify(spec, args):
    results = run_checks(spec, inject=args.inject)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_INVALID


COMMANDS = {"plan": cmd_plan, "kernels": cmd_kernels, "run": cmd_run, "verify": cmd_verify}


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("vgf-backstepping: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if args.config is not None and not os.path.isfile(args.config):
        print(f"vgf-backstepping: error: config file {args.config!r} not found", file=sys.stderr)
        return EXIT_USAGE
    try:
        spec = load_spec(args.config)
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](spec, args)
    except (SimulationAbort, DivergenceError) as exc:
        print(f"vgf-backstepping: numerical failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except VGFError as exc:
        print(f"vgf-backstepping: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

"""Reduced-scale self checks of every module, run by ``vgf-backstepping verify``.

Each check returns a :class:`Check`; :func:`run_checks` runs them in a fixed
order.  The ``inject`` hook deliberately corrupts one ingredient so that the
suite can be seen to fail.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from .coefficients import AnalyticCoefficients, CoefficientField
from .controller import ControllerConfig, PlantMeasurement, control_input, feedforward_input
from .kernel import (ThetaMap, build_kernel_bank, kernel_lookup, max_derivative_order,
                     required_derivative_order, solve_kernel_midpoint, solve_kernel_successive)
from .material import PHASES, StefanConfig
from .reference import ReferenceField
from .simulator import (SimConfig, SimState, enthalpy, initial_state, linearization_residual,
                        step)

__all__ = ["Check", "INJECTIONS", "run_checks"]

log = logging.getLogger(__name__)

INJECTIONS = ("kappa-sign",)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str


class _FlippedKappa(StefanConfig):
    """Material whose Stefan coefficients carry the wrong sign."""

    def kappa(self, phase):
        return -super().kappa(phase)


def _node_arrays(grid):
    _, _, eta, sig, val = map(np.array, zip(*grid.nodes()))
    return (eta + sig) / 2, (eta - sig) / 2, val


def check_order_map(ref, n_sigma=81):
    bad = sum(required_derivative_order(i, j) != min(i, j)
              for j in range(n_sigma + 1) for i in range(j, 2 * n_sigma - j + 1))
    n = 6
    c = CoefficientField(ref, "solid", 45000.0, mu=-1e-4, n_time=n + 1)
    theta = ThetaMap(c, ref.cfg.extent / n, ref.cfg.extent)
    wrong = 0
    for j in range(n + 1):
        for i in range(j + 1, 2 * n - j + 1):
            theta.reset_counters()
            theta.node(i, j)
            wrong += theta.a_orders != set(range(j + 1)) or theta.b_orders != set(range(j + 1))
    ok = bad == 0 and wrong == 0 and max_derivative_order(n_sigma) == n_sigma - 1
    return Check("order-map", ok, f"{bad} sweep mismatches, {wrong} interior counter mismatches")


def check_zero_kernel(alpha=3.3e-6):
    sizes = (1, 8, 33)
    clean = True
    for scheme in ("lower", "trapezoidal"):
        for n in sizes:
            g = solve_kernel_midpoint(AnalyticCoefficients.constant(alpha, n_time=n), 0.4 / n, 0.4,
                                      scheme=scheme)
            v = g.values[~np.isnan(g.values)]
            clean &= bool(np.all(v == 0.0) and not np.any(np.signbit(v)))
    return Check("kernel-zero", clean, f"N_sigma in {sizes}, both schemes")


def check_kernel_oracle(ref, mu=-1e-4, t=45000.0, sizes=(8, 16), oracle_size=64, C=1.0):
    """Lower-sum grids against the successive approximations on mild coefficients."""
    extent = ref.cfg.extent
    c = CoefficientField(ref, "solid", t, mu=mu, n_time=max(sizes))
    oracle, _ = solve_kernel_successive(c, extent, n_sigma=oracle_size)
    scale = np.nanmax(np.abs(oracle.values))
    devs, ok = [], True
    for n in sizes:
        g = solve_kernel_midpoint(c, extent / n, extent)
        x, xi, v = _node_arrays(g)
        devs.append(float(np.max(np.abs(v - kernel_lookup(oracle, x, xi)))))
        ok &= devs[-1] <= C * g.delta * scale
    order = math.log2(devs[0] / devs[1])
    ok &= 0.8 <= order <= 1.5
    return Check("kernel-oracle", bool(ok),
                 f"max deviation {devs[0]:.3e}, {devs[1]:.3e} (sup {scale:.3e}), order {order:.2f}")


def check_reference(ref, times=None, tol=1e-3, stefan_rel=1e-9):
    """Heat equation residual (absolute) and Stefan balance (relative) of the reference."""
    traj = ref.traj
    times = np.linspace(traj.y2.start_time, traj.end_time, 7) if times is None else times
    pde_max, stefan_max = 0.0, 0.0
    for t in times:
        for ph in PHASES:
            lo, hi = ref.domain(ph, t)
            z = np.linspace(lo, hi, 41)
            pde, stefan = ref.residuals(ph, z, t)
            pde_max = max(pde_max, float(np.max(np.abs(pde))))
        sc = ref.coefficients(t, 2)
        size = sum(abs(ref.cfg.kappa(ph) * sc.coeffs[ph][1, 0]) for ph in PHASES)
        stefan_max = max(stefan_max, abs(stefan) / size)
    ok = bool(pde_max <= tol and stefan_max <= stefan_rel)
    return Check("reference", ok, f"heat residual {pde_max:.2e}, relative Stefan residual "
                                  f"{stefan_max:.2e}")


def check_controller(ref, mu=-1e-2, n_sigma=16):
    times = [0.0, 30000.0]
    banks = {ph: build_kernel_bank(ref, ph, mu, n_sigma, times) for ph in PHASES}
    cfg = ControllerConfig(ref, banks, mu=mu)
    rng = np.random.default_rng(7)
    t = 15000.0
    gamma = ref.interface(t)
    z = {ph: np.linspace(gamma, ref.cfg.phase(ph).boundary_coord, 41) for ph in PHASES}
    T = {ph: ref.samples(ph, z[ph], t, gamma) for ph in PHASES}
    worst, lin = 0.0, 0.0
    for ph in PHASES:
        ff = feedforward_input(ref, ph, t)
        q0 = control_input(PlantMeasurement(t, gamma, z, T), cfg, ph)
        worst = max(worst, abs(q0 - ff) / abs(ff))
        e1, e2 = rng.normal(size=(2, 41))
        q = [control_input(PlantMeasurement(t, gamma, z, {p: T[p] + e for p in PHASES}), cfg, ph) - q0
             for e in (e1, e2, 2 * e1 - 3 * e2)]
        lin = max(lin, abs(q[2] - 2 * q[0] + 3 * q[1]) / (abs(q[0]) + abs(q[1])))
    ok = bool(worst <= 1e-12 and lin <= 1e-9)
    return Check("controller", ok, f"zero error vs feedforward {worst:.1e}, superposition {lin:.1e}")


def check_conservation(ref):
    cfg = ref.cfg
    Tm = cfg.melting_temp
    flat = SimState(0.0, 0.25, {ph: np.full(41, Tm) for ph in PHASES})
    new, info = step(cfg, flat, {ph: 0.0 for ph in PHASES}, 60.0)
    fixed = new.gamma == flat.gamma and all(np.array_equal(new.T[ph], flat.T[ph]) for ph in PHASES)
    sim = SimConfig(dgamma0=0.004, dgamma_dot0=-2e-3 / 3600)
    st = initial_state(ref, sim)
    worst = 0.0
    for k in range(10):
        inputs = {"solid": -150.0 + 10.0 * k, "liquid": 120.0 - 7.0 * k}
        new, info = step(cfg, st, inputs, sim.dt, sim)
        dE = enthalpy(cfg, new) - enthalpy(cfg, st)
        net = sim.dt * sum(info.inputs.values())
        gross = sim.dt * sum(abs(v) for v in info.inputs.values())
        worst = max(worst, abs(dE - net) / gross)
        st = new
    ok = bool(fixed and worst <= 1e-8)
    return Check("conservation", ok, f"fixed point {'exact' if fixed else 'broken'}, "
                                     f"ledger {worst:.1e}")


def check_linearization(ref, eps=(1e-2, 1e-3), window=(70.0, 130.0)):
    r = [linearization_residual(ref, e) for e in eps]
    ratio = r[0] / r[1]
    ok = bool(window[0] <= ratio <= window[1])
    return Check("linearization", ok, f"residuals {r[0]:.3e}, {r[1]:.3e}, ratio {ratio:.1f}")


def run_checks(spec, inject=None):
    """Run every check on ``spec`` at reduced scale; returns a list of :class:`Check`."""
    if inject is not None and inject not in INJECTIONS:
        raise ValueError(f"unknown injection {inject!r}")
    material = spec.material
    if inject == "kappa-sign":
        m = material
        material = _FlippedKappa(m.solid, m.liquid, m.melting_temp, m.melt_density, m.latent_heat)
    ref = ReferenceField(spec.trajectory.build(), material, spec.trajectory.order)
    checks = (
        lambda: check_order_map(ref),
        check_zero_kernel,
        lambda: check_kernel_oracle(ref),
        lambda: check_reference(ref),
        lambda: check_controller(ref, spec.controller.mu),
        lambda: check_conservation(ref),
        lambda: check_linearization(ref),
    )
    out = []
    for fn in checks:
        res = fn()
        log.info("%s: %s", res.name, res.detail)
        out.append(res)
    return out

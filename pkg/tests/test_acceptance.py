"""Acceptance gate: one test and one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are
printed to the terminal even when output capture is on.  Every tolerance is
a module constant below.
"""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vgf_backstepping.cli import bank_times
from vgf_backstepping.coefficients import AnalyticCoefficients, CoefficientField
from vgf_backstepping.controller import (ControllerConfig, PlantMeasurement, control_input,
                                         feedforward_input)
from vgf_backstepping.kernel import (ThetaMap, build_kernel_bank, kernel_lookup,
                                     required_derivative_order, solve_kernel_midpoint,
                                     solve_kernel_successive)
from vgf_backstepping.material import PHASES
from vgf_backstepping.reference import ReferenceField
from vgf_backstepping.simulator import (SimConfig, SimState, _weights, enthalpy, initial_state,
                                        linearization_residual, run_closed_loop, step)

# 1: kernel oracle equivalence
C1_SIZES = (8, 16)
C1_ORACLE_SIZE = 128
C1_MU = -1e-4  # 1/s; keeps the grids of C1_SIZES in the asymptotic range
C1_TIME = 45000.0
C1_C = 1.0  # 1/m, deviation bound C * delta * max|k|
C1_ORDER = (0.8, 1.5)
# 3: reference self-consistency
C3_RESIDUAL = 1e-3
C3_ORDER_SHIFT = 1e-9  # K
C3_ORDER = 20
C3_TIMES = 26
C3_POINTS = 41
# 4: linearization
C4_EPS = (1e-2, 1e-3)
C4_RATIO = (70.0, 130.0)
# 5: scenario
C5_MU = -1e-2
C5_NODES = 41
C5_DGAMMA0 = 0.01
C5_DGAMMA_DOT0 = -3e-3 / 3600
C5_T_END = 25 * 3600.0
C5_REDUCTION = 10.0
C5_L2_FRACTION = 0.1
C5_THREADS = 4
# 6: conservation
C6_SINGLE = 1e-10
C6_LEDGER = 1e-8
# 7: controller degeneracy
C7_FEEDFORWARD = 1e-12
C7_SUPERPOSITION = 1e-9
# 8: order map
C8_MAX_N = 81
C8_THETA_N = 6


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok
    return emit


def node_arrays(grid):
    _, _, eta, sig, val = map(np.array, zip(*grid.nodes()))
    return (eta + sig) / 2, (eta - sig) / 2, val


def test_criterion_1_kernel_oracle(ref, report):
    extent = ref.cfg.extent
    ok, parts = True, []
    for ph in PHASES:
        c = CoefficientField(ref, ph, C1_TIME, mu=C1_MU, n_time=max(C1_SIZES))
        oracle, _ = solve_kernel_successive(c, extent, n_sigma=C1_ORACLE_SIZE)
        scale = np.nanmax(np.abs(oracle.values))
        devs = []
        for n in C1_SIZES:
            g = solve_kernel_midpoint(c, extent / n, extent)
            x, xi, v = node_arrays(g)
            devs.append(float(np.max(np.abs(v - kernel_lookup(oracle, x, xi)))))
            ok &= devs[-1] <= C1_C * g.delta * scale
        order = math.log2(devs[0] / devs[1])
        ok &= C1_ORDER[0] <= order <= C1_ORDER[1]
        parts.append(f"{ph}: dev {devs[0]:.3e}/{devs[1]:.3e} of max|k| {scale:.3e}, "
                     f"order {order:.2f}")
    assert report(1, ok, "; ".join(parts))


@settings(max_examples=25, deadline=None)
@given(n_sigma=st.integers(1, 40), alpha=st.floats(1e-7, 1e2),
       scheme=st.sampled_from(["lower", "trapezoidal"]),
       rule=st.sampled_from(["exact", "paper"]))
def test_criterion_2_zero_kernel(n_sigma, alpha, scheme, rule):
    g = solve_kernel_midpoint(AnalyticCoefficients.constant(alpha, n_time=n_sigma), 1.0 / n_sigma,
                              1.0, scheme=scheme, zeta0_rule=rule)
    v = g.values[~np.isnan(g.values)]
    assert v.size == (n_sigma + 1) ** 2
    assert np.all(v == 0.0) and not np.any(np.signbit(v))


def test_criterion_2_report(report):
    sizes = (1, 7, 80)
    ok = True
    for n in sizes:
        for scheme in ("lower", "trapezoidal"):
            g = solve_kernel_midpoint(AnalyticCoefficients.constant(3e-6, n_time=n), 0.4 / n, 0.4,
                                      scheme=scheme)
            v = g.values[~np.isnan(g.values)]
            ok &= bool(np.all(v == 0.0) and not np.any(np.signbit(v)))
    assert report(2, ok, f"bitwise zero grids for N_sigma in {sizes}, both schemes, "
                         "plus a randomized sweep")


def test_criterion_3_reference(spec, traj, report):
    refs = {m: ReferenceField(traj, spec.material, m) for m in (C3_ORDER // 2, C3_ORDER,
                                                                  2 * C3_ORDER)}
    ref = refs[C3_ORDER]
    heat = stefan = 0.0
    shift = {m: 0.0 for m in refs if m != C3_ORDER}
    for t in np.linspace(0.0, traj.end_time, C3_TIMES):
        for ph in PHASES:
            lo, hi = ref.domain(ph, t)
            z = np.linspace(lo, hi, C3_POINTS)
            pde, st_res = ref.residuals(ph, z, t)
            heat = max(heat, float(np.max(np.abs(pde))))
            stefan = max(stefan, abs(float(st_res)))
            base = ref.evaluate(ph, z, t)
            for m in shift:
                shift[m] = max(shift[m], float(np.max(np.abs(refs[m].evaluate(ph, z, t) - base))))
    ok_res = heat <= C3_RESIDUAL and stefan <= C3_RESIDUAL
    ok_shift = all(v < C3_ORDER_SHIFT for v in shift.values())
    detail = (f"residuals heat {heat:.2e}, Stefan {stefan:.2e} (<= {C3_RESIDUAL}); "
              + ", ".join(f"M={m} shift {v:.2e} K" for m, v in shift.items())
              + f" (< {C3_ORDER_SHIFT} K)")
    assert report(3, ok_res and ok_shift, detail)


def test_criterion_4_linearization(ref, report):
    r = [linearization_residual(ref, e) for e in C4_EPS]
    ratio = r[0] / r[1]
    ok = C4_RATIO[0] <= ratio <= C4_RATIO[1]
    assert report(4, ok, f"residuals {r[0]:.3e} and {r[1]:.3e} K/s, ratio {ratio:.1f} "
                         f"in {C4_RATIO}")


@pytest.fixture(scope="module")
def scenario(spec, ref):
    banks = {ph: build_kernel_bank(ref, ph, C5_MU, spec.kernel.n_sigma, bank_times(spec),
                                   threads=C5_THREADS) for ph in PHASES}
    ctl = ControllerConfig(ref, banks, mu=C5_MU, nu=0.0)
    runs = {}
    base = dict(nodes=C5_NODES, profile_every=0, t_end=C5_T_END)
    runs["perturbed"] = run_closed_loop(
        ref, SimConfig(dgamma0=C5_DGAMMA0, dgamma_dot0=C5_DGAMMA_DOT0, **base), ctl)
    runs["quiet"] = run_closed_loop(ref, SimConfig(dgamma0=0.0, dgamma_dot0=0.0, **base), ctl)
    runs["feedforward"] = run_closed_loop(ref, SimConfig(dgamma0=0.0, dgamma_dot0=0.0, **base))
    return runs


def test_criterion_5_scenario(scenario, report):
    for name, lg in scenario.items():
        assert not lg.aborted, f"{name}: {lg.aborted}"
    lg = scenario["perturbed"]
    t = lg.column("t")
    assert t[-1] == pytest.approx(C5_T_END)
    dg = np.abs(lg.column("dgamma"))
    reduction = dg[0] / dg.min()
    ok_a = reduction >= C5_REDUCTION
    fractions = {ph: lg.column(f"l2_{ph}")[-1] / lg.column(f"l2_{ph}").max() for ph in PHASES}
    ok_b = all(f <= C5_L2_FRACTION for f in fractions.values())
    quiet = np.max(np.abs(scenario["quiet"].column("dgamma")))
    bound = np.max(np.abs(scenario["feedforward"].column("dgamma")))
    ok_c = quiet < bound
    detail = (f"(a) {'PASS' if ok_a else 'FAIL'} |dgamma| {1e3 * dg[0]:.3f} -> min "
              f"{1e3 * dg.min():.4f} mm, reduction {reduction:.3f} (>= {C5_REDUCTION}); "
              f"(b) {'PASS' if ok_b else 'FAIL'} final/peak L2 solid {fractions['solid']:.2e}, "
              f"liquid {fractions['liquid']:.2e} (<= {C5_L2_FRACTION}); "
              f"(c) {'PASS' if ok_c else 'FAIL'} quiet max|dgamma| {1e3 * quiet:.4f} mm < "
              f"feedforward bound {1e3 * bound:.4f} mm")
    assert report(5, ok_a and ok_b and ok_c, detail)


def test_criterion_6_conservation(gaas, ref, report):
    Tm = gaas.melting_temp
    flat = SimState(0.0, 0.25, {ph: np.full(41, Tm) for ph in PHASES})
    new, info = step(gaas, flat, {ph: 0.0 for ph in PHASES}, 60.0)
    fixed = (new.gamma == flat.gamma and info.gamma_dot == 0.0
             and all(np.array_equal(new.T[ph], flat.T[ph]) for ph in PHASES))
    # single phase, interface frozen: storage equals heater input minus interface outflow
    x = np.linspace(0, 1, 41)
    st0 = SimState(0.0, 0.25, {"solid": Tm - 30 * x + 3 * np.sin(5 * x), "liquid": Tm + 20 * x ** 2})
    single = 0.0
    for q in (0.0, 350.0):
        new, info = step(gaas, st0, {"solid": q, "liquid": -q}, 60.0, SimConfig(freeze_interface=True))
        for ph in PHASES:
            p = gaas.phase(ph)
            ell = gaas.phase_length(ph, 0.25)
            dE = p.heat_capacity * ell * _weights(41) @ (new.T[ph] - st0.T[ph]) / 60.0
            balance = info.inputs[ph] - p.heat_capacity * info.flux0[ph]
            single = max(single, abs(dE - balance) / abs(balance))
    # two phases with latent heat
    sim = SimConfig(dgamma0=0.004, dgamma_dot0=-2e-3 / 3600)
    st = initial_state(ref, sim)
    rng = np.random.default_rng(11)
    ledger = 0.0
    for _ in range(20):
        inputs = {"solid": -150.0 + 40 * rng.normal(), "liquid": 120.0 + 40 * rng.normal()}
        new, info = step(ref.cfg, st, inputs, sim.dt, sim)
        dE = enthalpy(ref.cfg, new) - enthalpy(ref.cfg, st)
        net = sim.dt * sum(info.inputs.values())
        gross = sim.dt * sum(abs(v) for v in info.inputs.values())
        ledger = max(ledger, abs(dE - net) / gross)
        st = new
    ok = fixed and single <= C6_SINGLE and ledger <= C6_LEDGER
    assert report(6, ok, f"fixed point {'exact' if fixed else 'broken'}; single phase "
                         f"{single:.1e} (<= {C6_SINGLE}); two-phase ledger {ledger:.1e} "
                         f"(<= {C6_LEDGER})")


def test_criterion_7_controller(ref, report):
    times = [0.0, 45000.0, 90000.0]
    banks = {ph: build_kernel_bank(ref, ph, C5_MU, 16, times) for ph in PHASES}
    cfg = ControllerConfig(ref, banks, mu=C5_MU)
    rng = np.random.default_rng(3)
    worst = lin = 0.0
    for t in (0.0, 20000.0, 45000.0, 80000.0):
        for gamma in (ref.interface(t), ref.interface(t) + 0.005):
            z = {ph: np.linspace(gamma, ref.cfg.phase(ph).boundary_coord, 41) for ph in PHASES}
            T = {ph: ref.samples(ph, z[ph], t, gamma) for ph in PHASES}
            for ph in PHASES:
                q0 = control_input(PlantMeasurement(t, gamma, z, T), cfg, ph)
                if gamma == ref.interface(t):
                    ff = feedforward_input(ref, ph, t)
                    worst = max(worst, abs(q0 - ff) / abs(ff))
                e1, e2 = rng.normal(size=(2, 41))
                q = [control_input(PlantMeasurement(t, gamma, z, {p: T[p] + e for p in PHASES}),
                                   cfg, ph) - q0 for e in (e1, e2, 2 * e1 - 3 * e2)]
                lin = max(lin, abs(q[2] - 2 * q[0] + 3 * q[1]) / (abs(q[0]) + abs(q[1])))
    ok = worst <= C7_FEEDFORWARD and lin <= C7_SUPERPOSITION
    assert report(7, ok, f"zero error vs feedforward {worst:.1e} (<= {C7_FEEDFORWARD}); "
                         f"superposition {lin:.1e} (<= {C7_SUPERPOSITION})")


def test_criterion_8_order_map(ref, report):
    bad = 0
    for n in range(1, C8_MAX_N + 1):
        for j in range(n + 1):
            for i in range(j, 2 * n - j + 1):
                bad += required_derivative_order(i, j) != min(i, j)
    n = C8_THETA_N
    c = CoefficientField(ref, "solid", 45000.0, mu=C1_MU, n_time=n + 1)
    theta = ThetaMap(c, ref.cfg.extent / n, ref.cfg.extent)
    grid = solve_kernel_midpoint(c, ref.cfg.extent / n, ref.cfg.extent)
    wrong = interior = 0
    for j in range(n + 1):
        for i in range(j + 1, 2 * n - j + 1):
            theta.reset_counters()
            val = theta.node(i, j)
            interior += 1
            wrong += (theta.a_orders != set(range(j + 1)) or theta.b_orders != set(range(j + 1))
                      or not math.isclose(val, grid.values[i, j], rel_tol=1e-10, abs_tol=1e-14))
    ok = bad == 0 and wrong == 0
    assert report(8, ok, f"{bad} order mismatches over all triangles N_sigma <= {C8_MAX_N}; "
                         f"{wrong}/{interior} interior nodes with wrong counters or values")

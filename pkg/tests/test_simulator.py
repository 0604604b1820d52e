import csv
import json
import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from vgf_backstepping.controller import ControllerConfig
from vgf_backstepping.errors import ParameterError, SimulationAbort
from vgf_backstepping.kernel import build_kernel_bank
from vgf_backstepping.material import PHASES
from vgf_backstepping.simulator import (
    RunLog,
    SimConfig,
    SimState,
    enthalpy,
    error_norms,
    initial_state,
    interface_velocity,
    linearization_residual,
    node_positions,
    run_closed_loop,
    step,
)
from vgf_backstepping.simulator import _weights

UNIT_INPUTS = {"solid": -1.0, "liquid": 0.5}


def unit_profiles(cfg, n, gamma=0.5):
    s = np.linspace(0, 1, n)
    T = {}
    for ph, a, b in (("solid", -1.0, 0.3), ("liquid", 0.5, -0.2)):
        ell = cfg.phase_length(ph, gamma)
        x = s * ell
        T[ph] = 1.0 + a * x + b * np.sin(np.pi * x / ell)
    return T


def deforming_grid_gamma(cfg, n, t_end, inputs, gamma0=0.5):
    """Independent solver: finite differences on nodes that move with the interface.

    Node ``i`` sits at ``z_i = gamma + (z_b - gamma) s_i``; along its path
    ``dT/dt = alpha T_zz + dz_i/dt T_z``.  The Neumann end uses a ghost node,
    time integration is scipy's BDF.
    """
    s = np.linspace(0, 1, n)
    T0 = unit_profiles(cfg, n, gamma0)
    y0 = np.concatenate(([gamma0], T0["solid"][1:], T0["liquid"][1:]))
    Tm = cfg.melting_temp

    def rhs(t, y):
        g = y[0]
        parts = {"solid": y[1:n], "liquid": y[n:]}
        derivs, grads = {}, {}
        for ph in PHASES:
            p = cfg.phase(ph)
            T = np.concatenate(([Tm], parts[ph]))
            hz = (p.boundary_coord - g) / (n - 1)
            ghost = T[-2] + 2 * hz * p.orientation * inputs[ph] / p.conductivity
            Te = np.append(T, ghost)
            derivs[ph] = ((Te[2:] - Te[:-2]) / (2 * hz), (Te[2:] - 2 * Te[1:-1] + Te[:-2]) / hz ** 2)
            grads[ph] = (-3 * T[0] + 4 * T[1] - T[2]) / (2 * hz)
        gdot = (cfg.solid.conductivity * grads["solid"] - cfg.liquid.conductivity * grads["liquid"]) \
            / (cfg.melt_density * cfg.latent_heat)
        out = np.empty_like(y)
        out[0] = gdot
        for k, ph in ((1, "solid"), (n, "liquid")):
            Tz, Tzz = derivs[ph]
            out[k:k + n - 1] = cfg.phase(ph).diffusivity * Tzz + gdot * (1 - s[1:]) * Tz
        return out

    sol = solve_ivp(rhs, (0.0, t_end), y0, method="BDF", rtol=1e-11, atol=1e-13)
    return sol.y[0, -1]


def test_interface_velocity_examples(unit_cfg, gaas):
    n = 11
    s = np.linspace(0, 1, n)
    ell_s = unit_cfg.phase_length("solid", 0.5)
    # dT_s/dz = 1 at the interface means T_s = 1 - x in the distance x = gamma - z
    st = SimState(0.0, 0.5, {"solid": 1.0 - s * ell_s, "liquid": np.ones(n)})
    assert interface_velocity(unit_cfg, st) == pytest.approx(1.0, rel=1e-14)
    # matched fluxes
    g_s = 17.0
    g_l = gaas.solid.conductivity * g_s / gaas.liquid.conductivity
    gamma = 0.2
    T = {"solid": gaas.melting_temp - g_s * s * gaas.phase_length("solid", gamma),
         "liquid": gaas.melting_temp + g_l * s * gaas.phase_length("liquid", gamma)}
    assert interface_velocity(gaas, SimState(0.0, gamma, T)) == pytest.approx(0.0, abs=1e-18)


def test_steady_reference_profile_is_at_rest(ref):
    st = initial_state(ref, SimConfig(dgamma0=0.0, dgamma_dot0=0.0))
    # melt gradient balances the 17 K/m solid gradient at zero velocity
    assert abs(interface_velocity(ref.cfg, st)) < 1e-3 * 3e-3 / 3600


def test_uniform_melting_temperature_is_exact_fixed_point(gaas):
    Tm = gaas.melting_temp
    st = SimState(0.0, 0.25, {ph: np.full(41, Tm) for ph in PHASES})
    new, info = step(gaas, st, {ph: 0.0 for ph in PHASES}, 60.0)
    assert new.gamma == st.gamma
    assert info.gamma_dot == 0.0
    for ph in PHASES:
        np.testing.assert_array_equal(new.T[ph], st.T[ph])


@pytest.mark.parametrize("q", [0.0, 350.0])
def test_frozen_single_phase_enthalpy_balance(gaas, q):
    """With the interface frozen each phase gains exactly heater input minus interface outflow."""
    x = np.linspace(0, 1, 41)
    Tm = gaas.melting_temp
    st = SimState(0.0, 0.25, {"solid": Tm - 30 * x + 3 * np.sin(5 * x), "liquid": Tm + 20 * x ** 2})
    dt = 60.0
    sim = SimConfig(freeze_interface=True)
    new, info = step(gaas, st, {"solid": q, "liquid": -q}, dt, sim)
    for ph in PHASES:
        p = gaas.phase(ph)
        ell = gaas.phase_length(ph, 0.25)
        E0 = p.heat_capacity * ell * _weights(41) @ st.T[ph]
        E1 = p.heat_capacity * ell * _weights(41) @ new.T[ph]
        balance = info.inputs[ph] - p.heat_capacity * info.flux0[ph]
        assert (E1 - E0) / dt == pytest.approx(balance, rel=1e-10)
    # insulated: no heater flux and no interface gradient leaves the sensible heat unchanged
    flat = SimState(0.0, 0.25, {ph: np.full(41, Tm) for ph in PHASES})
    new, _ = step(gaas, flat, {ph: 0.0 for ph in PHASES}, dt, sim)
    assert enthalpy(gaas, new) == enthalpy(gaas, flat)


def test_two_phase_enthalpy_ledger(ref):
    sim = SimConfig(dgamma0=0.004, dgamma_dot0=-2e-3 / 3600)
    st = initial_state(ref, sim)
    rng = np.random.default_rng(5)
    for _ in range(20):
        inputs = {"solid": -150.0 + 40 * rng.normal(), "liquid": 120.0 + 40 * rng.normal()}
        new, info = step(ref.cfg, st, inputs, sim.dt, sim)
        dE = enthalpy(ref.cfg, new) - enthalpy(ref.cfg, st)
        net = sim.dt * (info.inputs["solid"] + info.inputs["liquid"])
        # relative to the gross energy moved in the step
        gross = sim.dt * (abs(info.inputs["solid"]) + abs(info.inputs["liquid"]))
        assert abs(dE - net) <= 1e-8 * gross
        st = new


def test_realized_initial_velocity(ref):
    sim = SimConfig()
    st = initial_state(ref, sim)
    assert st.gamma - ref.interface(0.0) == pytest.approx(0.01, rel=1e-12)
    offset = interface_velocity(ref.cfg, st) - ref.traj.velocity(0.0)
    assert offset == pytest.approx(-3e-3 / 3600, rel=0.05)
    for ph in PHASES:
        assert st.T[ph][0] == ref.cfg.melting_temp


def test_moving_frame_matches_deforming_grid(unit_cfg):
    diffs = []
    for n in (11, 21, 41):
        st = SimState(0.0, 0.5, unit_profiles(unit_cfg, n))
        sim = SimConfig(nodes=n, dt=2e-5, guard=0.0)
        for _ in range(2500):
            st, _ = step(unit_cfg, st, UNIT_INPUTS, sim.dt, sim)
        diffs.append(abs(st.gamma - deforming_grid_gamma(unit_cfg, n, 0.05, UNIT_INPUTS)))
    ratios = np.array(diffs[:-1]) / diffs[1:]
    assert np.all((ratios > 3.5) & (ratios < 4.5))


def test_feedforward_tracking_spatial_refinement(ref):
    """Same time step on N = 21, 41, 81: successive differences shrink like N^-2."""
    t_end = 45000.0
    gam = {}
    for n in (21, 41, 81):
        sim = SimConfig(nodes=n, dt=120.0, dgamma0=0.0, dgamma_dot0=0.0, profile_every=0)
        log = run_closed_loop(ref, sim, None, t_end=t_end)
        assert not log.aborted
        gam[n] = log.column("gamma")
    d1 = np.max(np.abs(gam[21] - gam[41]))
    d2 = np.max(np.abs(gam[41] - gam[81]))
    assert 3.0 < d1 / d2 < 5.0
    # time discretisation dominates and stays a small fraction of the 100 mm travel
    assert np.max(np.abs(gam[41] - np.array([ref.interface(t) for t in np.arange(376) * 120.0]))) < 1e-3


def test_error_norms(ref):
    sim = SimConfig(dgamma0=0.0, dgamma_dot0=0.0)
    st = initial_state(ref, sim)
    l2s, l2l, dg = error_norms(ref, st)
    assert l2s == 0.0 and l2l == 0.0 and dg == 0.0
    shifted = SimState(st.t, st.gamma, {"solid": st.T["solid"] + 1.0, "liquid": st.T["liquid"]})
    l2s, _, _ = error_norms(ref, shifted)
    assert l2s == pytest.approx(math.sqrt(ref.cfg.phase_length("solid", st.gamma)), rel=1e-13)
    pert = initial_state(ref, SimConfig())
    assert error_norms(ref, pert)[2] == pytest.approx(0.01, rel=1e-12)


def test_node_positions_and_guard(gaas):
    st = SimState(0.0, 0.3, {ph: np.full(9, gaas.melting_temp) for ph in PHASES})
    z = node_positions(gaas, st)
    assert z["solid"][0] == 0.3 and z["solid"][-1] == pytest.approx(0.0, abs=1e-16)
    assert z["liquid"][-1] == pytest.approx(0.4)
    near = SimState(0.0, 0.395, st.T)
    with pytest.raises(SimulationAbort, match="guard"):
        step(gaas, near, {"solid": 0.0, "liquid": 0.0}, 60.0)
    with pytest.raises(SimulationAbort):
        step(gaas, st, {"solid": float("nan"), "liquid": 0.0}, 60.0)
    with pytest.raises(ParameterError):
        SimConfig(nodes=4)


def test_partial_log_on_abort(ref):
    banks = {ph: build_kernel_bank(ref, ph, -1e-2, 8, [0.0, 600.0]) for ph in PHASES}
    ctl = ControllerConfig(ref, banks, mu=-1e-2)
    log = run_closed_loop(ref, SimConfig(profile_every=0), ctl, t_end=1200.0)
    assert log.aborted.startswith("StalenessError")
    assert len(log.rows) == 11 and log.rows[-1][0] == 600.0
    assert log.final_state.t == 600.0


def test_runlog_serialisation(tmp_path, ref):
    log = run_closed_loop(ref, SimConfig(dgamma0=0.0, dgamma_dot0=0.0, profile_every=2), None,
                          t_end=300.0)
    csv_path, meta_path, prof_path = tmp_path / "run.csv", tmp_path / "run.json", tmp_path / "p.csv"
    log.write_csv(csv_path, meta_path)
    log.write_profiles(prof_path)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "# vgf-runlog v1"
    rows = list(csv.reader(lines[1:]))
    assert tuple(rows[0]) == RunLog.COLUMNS and len(rows) == 7
    assert [float(v) for v in rows[-1]] == list(log.rows[-1])
    assert json.loads(meta_path.read_text())["sim"]["nodes"] == 41
    assert prof_path.read_text().startswith("# vgf-profiles v1\nt,phase,z,T,error\n")
    again = tmp_path / "again.csv"
    run_closed_loop(ref, SimConfig(dgamma0=0.0, dgamma_dot0=0.0, profile_every=2), None,
                    t_end=300.0).write_csv(again)
    assert again.read_bytes() == csv_path.read_bytes()


def test_stronger_target_decay_reduces_errors(ref):
    """Doubling |mu| speeds up the decay of both error norms.

    Both runs reach the discretisation floor within about an hour, so the
    comparison is made while the initial perturbation still dominates.
    """
    times = np.linspace(0.0, 2400.0, 9)
    l2 = {}
    for mu in (-1e-2, -2e-2):
        banks = {ph: build_kernel_bank(ref, ph, mu, 80, times, threads=4) for ph in PHASES}
        ctl = ControllerConfig(ref, banks, mu=mu)
        log = run_closed_loop(ref, SimConfig(profile_every=0), ctl, t_end=2400.0)
        assert not log.aborted
        t = log.column("t")
        pick = np.isin(t, (1200.0, 2400.0))
        l2[mu] = np.stack((log.column("l2_solid")[pick], log.column("l2_liquid")[pick]))
    assert np.all(l2[-2e-2] < l2[-1e-2])


def test_linearization_residual_is_quadratic(ref):
    eps = np.array([4e-2, 2e-2, 1e-2])
    r = np.array([linearization_residual(ref, e) for e in eps])
    np.testing.assert_allclose(r / eps ** 2, r[-1] / eps[-1] ** 2, rtol=0.05)
    # a shorter step leaves the gap per unit time unchanged
    assert linearization_residual(ref, 1e-2, dt=0.05) == pytest.approx(r[-1], rel=0.02)

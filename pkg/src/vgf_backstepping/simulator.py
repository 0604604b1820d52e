"""Front-fixed finite-volume model of the two-phase Stefan problem.

Each phase is mapped to ``s in [0, 1]`` with ``x = s * ell``, where
``x = beta (z - gamma)`` is the distance from the interface and ``ell`` the
phase length.  In these coordinates the heat equation is conservative,

    d(ell T)/dt = d/ds [ (alpha/ell) dT/ds + beta gamma_dot (1 - s) T ],

and is discretised with cell-vertex finite volumes: node 0 sits on the
interface (Dirichlet, melting temperature), the last node carries a half
cell with the heater flux.  Diffusion is implicit, the mesh-motion flux is
explicit in the old temperatures, and the interface velocity of a step is
found by fixed-point iteration so that the Stefan condition uses the same
interface flux as the temperature update.  With that choice the discrete
enthalpy, latent heat included, changes exactly by the boundary inputs.
"""
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .errors import ParameterError, SimulationAbort, VGFError
from .material import LIQUID, PHASES, SOLID

__all__ = ["SimState", "SimConfig", "StepInfo", "RunLog", "initial_state", "interface_velocity",
           "step", "enthalpy", "node_positions", "run_closed_loop", "error_norms",
           "calibrate_velocity_bump", "linearization_residual"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimState:
    """Plant state: time, interface position and nodal temperatures per phase."""

    t: float
    gamma: float
    T: dict

    def copy(self):
        return SimState(self.t, self.gamma, {k: v.copy() for k, v in self.T.items()})


@dataclass(frozen=True)
class SimConfig:
    """Numerical set-up of the plant model.

    ``guard`` is the minimal distance (m) the interface keeps from either
    heated boundary; ``bump_width`` is the decay length, relative to the
    liquid length, of the gradient bump that seeds ``dgamma_dot0``.  ``freeze_interface`` pins ``gamma`` (the infinite
    latent heat limit) for single-phase checks.
    """

    nodes: int = 41
    dt: float = 60.0
    t_end: float = 90000.0
    dgamma0: float = 0.01
    dgamma_dot0: float = -3e-3 / 3600.0
    feedforward_only: bool = False
    profile_every: int = 60
    guard: float = 0.01
    bump_width: float = 0.125
    freeze_interface: bool = False
    velocity_tol: float = 1e-13
    max_velocity_iter: int = 100

    def __post_init__(self):
        if self.nodes < 5:
            raise ParameterError("at least 5 nodes per phase are required")
        if not self.dt > 0:
            raise ParameterError("time step must be positive")
        if not self.guard >= 0:
            raise ParameterError("guard must be non-negative")
        if not self.bump_width > 0:
            raise ParameterError("bump_width must be positive")


@dataclass(frozen=True)
class StepInfo:
    """Diagnostics of one step; ``inputs`` are the heater fluxes applied."""

    gamma_dot: float
    flux0: dict
    iterations: int
    inputs: dict


def _phase_length(cfg, phase, gamma):
    return cfg.phase_length(phase, gamma)


def node_positions(cfg, state):
    """Crucible coordinates of the nodes of each phase, interface first."""
    out = {}
    for ph in PHASES:
        p = cfg.phase(ph)
        n = state.T[ph].size
        ell = _phase_length(cfg, ph, state.gamma)
        out[ph] = state.gamma + p.orientation * ell * np.linspace(0.0, 1.0, n)
    return out


def _weights(n):
    """Enthalpy quadrature weights on the unit interval (sum 1)."""
    h = 1.0 / (n - 1)
    w = np.full(n, h)
    w[0] = 3 * h / 8
    w[1] = 9 * h / 8
    w[-1] = h / 2
    return w


def enthalpy(cfg, state):
    """Sensible plus latent heat per unit cross-section (J/m^2).

    ``sum rho c int T dx - rho_melt L gamma + (rho_l c_l - rho_s c_s) T_m gamma``;
    its rate equals the sum of both heater fluxes.
    """
    total = 0.0
    for ph in PHASES:
        p = cfg.phase(ph)
        T = state.T[ph]
        total += p.heat_capacity * _phase_length(cfg, ph, state.gamma) * np.dot(_weights(T.size), T)
    total -= cfg.melt_density * cfg.latent_heat * state.gamma
    total += (cfg.liquid.heat_capacity - cfg.solid.heat_capacity) * cfg.melting_temp * state.gamma
    return total


def interface_velocity(cfg, state):
    """Stefan velocity from one-sided second-order gradients at the interface.

    ``rho_melt L dgamma/dt = lambda_s dT_s/dz - lambda_l dT_l/dz``.
    """
    total = 0.0
    for ph in PHASES:
        p = cfg.phase(ph)
        T = state.T[ph]
        h = _phase_length(cfg, ph, state.gamma) / (T.size - 1)
        gx = (-3.0 * T[0] + 4.0 * T[1] - T[2]) / (2.0 * h)
        total += p.conductivity * gx
    return -total / (cfg.melt_density * cfg.latent_heat)


def _phase_update(p, Tm, T, ell0, ell1, beta_gdot, q, dt, gains=None):
    """Implicit temperature update of one phase for a given interface velocity.

    The heater flux is ``q + gains @ T_new`` (``gains`` None means a fixed
    flux).  Returns the new temperatures, the recovered interface flux of the
    step (in ``s`` coordinates, i.e. ``alpha dT/dx + beta gamma_dot T``) and
    the applied heater flux.
    """
    n = T.size
    h = 1.0 / (n - 1)
    alpha = p.diffusivity
    s_half = (np.arange(n - 1) + 0.5) * h
    # explicit mesh-motion flux at the cell faces
    conv = beta_gdot * (1.0 - s_half) * 0.5 * (T[:-1] + T[1:])
    d = alpha / (ell1 * h)
    m = n - 1  # unknowns T_1 .. T_{n-1}
    mass = np.full(m, h)
    mass[-1] = h / 2
    ab = np.zeros((3, m))
    ab[1] = ell1 * mass / dt + 2.0 * d
    ab[1, -1] = ell1 * mass[-1] / dt + d
    ab[0, 1:] = -d
    ab[2, :-1] = -d
    # solved for T - Tm so that a uniform melting temperature is reproduced exactly
    rhs = ell0 * mass * (T[1:] - Tm) / dt + (ell0 - ell1) * mass * Tm / dt \
        + (np.append(conv[1:], 0.0) - conv)
    scale = alpha / p.conductivity
    if gains is None:
        rhs[-1] += scale * q
        theta = solve_banded((1, 1), ab, rhs)
    else:
        # implicit feedback: rank-one row on the boundary equation
        rhs[-1] += scale * (q + Tm * np.sum(gains))
        c = -scale * gains[1:]
        e = np.zeros(m)
        e[-1] = 1.0
        y, w = solve_banded((1, 1), ab, np.column_stack((rhs, e))).T
        theta = y - w * (c @ y) / (1.0 + c @ w)
    new = np.empty(n)
    new[0] = Tm
    new[1:] = Tm + theta
    if gains is not None:
        q = q + Tm * np.sum(gains) + gains[1:] @ theta
    F = d * np.diff(np.append(0.0, theta)) + conv
    dl = (ell1 - ell0) / dt
    flux0 = (9.0 * F[0] - F[1]) / 8.0 - 3.0 * h / 8.0 * dl * Tm
    return new, flux0, q


def step(cfg, state, inputs, dt, sim=None):
    """Advance the plant by one step.

    ``inputs[phase]`` is either a fixed heater flux or a callable
    ``(t, gamma, z) -> (offset, gains)`` giving the flux
    ``offset + gains @ T`` at the end of the step; the latter is solved
    implicitly together with the temperatures.

    Returns the new state and a :class:`StepInfo`.
    """
    sim = sim or SimConfig()
    if not dt > 0:
        raise ParameterError("time step must be positive")
    for ph in PHASES:
        if not callable(inputs[ph]) and not math.isfinite(inputs[ph]):
            raise SimulationAbort(f"non-finite {ph} input at t={state.t}")
    rl = cfg.melt_density * cfg.latent_heat

    def solve(gdot):
        gamma1 = state.gamma + dt * gdot
        out, f0, q = {}, {}, {}
        for ph in PHASES:
            p = cfg.phase(ph)
            ell0 = _phase_length(cfg, ph, state.gamma)
            ell1 = _phase_length(cfg, ph, gamma1)
            if not ell1 > 0:
                raise SimulationAbort(f"{ph} phase vanished at t={state.t}")
            src, gains = inputs[ph], None
            if callable(src):
                z1 = gamma1 + p.orientation * ell1 * np.linspace(0.0, 1.0, state.T[ph].size)
                src, gains = src(state.t + dt, gamma1, z1)
                if not (np.isfinite(src) and np.all(np.isfinite(gains))):
                    raise SimulationAbort(f"non-finite {ph} feedback at t={state.t + dt}")
            out[ph], f0[ph], q[ph] = _phase_update(p, cfg.melting_temp, state.T[ph], ell0, ell1,
                                                   p.orientation * gdot, src, dt, gains)
        return gamma1, out, f0, q

    def stefan(gdot, f0):
        # lambda dT/dx(0) = rho c (F0 - beta gdot Tm)
        s = 0.0
        for ph in PHASES:
            p = cfg.phase(ph)
            s += p.heat_capacity * (f0[ph] - p.orientation * gdot * cfg.melting_temp)
        return -s / rl

    if sim.freeze_interface:
        gamma1, out, f0, q = solve(0.0)
        return SimState(state.t + dt, state.gamma, out), StepInfo(0.0, f0, 0, q)
    gdot = interface_velocity(cfg, state)
    prev = math.inf
    for it in range(1, sim.max_velocity_iter + 1):
        gamma1, out, f0, q = solve(gdot)
        new = stefan(gdot, f0)
        if not math.isfinite(new):
            raise SimulationAbort(f"interface velocity diverged at t={state.t}")
        # rounding floor: size of the individual flux contributions
        scale = max(abs(new), sum(abs(cfg.phase(ph).heat_capacity * f0[ph]) for ph in PHASES) / rl)
        inc = abs(new - gdot)
        # stagnation of a small increment means the feedback rounding floor is reached
        done = inc <= sim.velocity_tol * scale or (inc >= prev and inc <= 1e-8 * scale)
        prev = inc
        gdot = new
        if done:
            break
    else:
        log.warning("interface velocity iteration did not converge at t=%g", state.t)
    gamma1, out, f0, q = solve(gdot)
    lo, hi = cfg.domain
    if not lo + sim.guard < gamma1 < hi - sim.guard:
        raise SimulationAbort(f"interface left the guard band at t={state.t + dt}: gamma={gamma1}")
    return SimState(state.t + dt, gamma1, out), StepInfo(gdot, f0, it, q)


def calibrate_velocity_bump(cfg, T_solid, T_liquid, gamma, target_velocity, width=0.125):
    """Amplitude of a liquid gradient bump giving a prescribed interface velocity.

    The bump is ``g * x * exp(-x / (width * ell))``; its amplitude is chosen so that
    :func:`interface_velocity` of the discrete profile hits the target
    exactly (the velocity is affine in the amplitude).
    """
    n = T_liquid.size
    ell = _phase_length(cfg, LIQUID, gamma)
    x = ell * np.linspace(0.0, 1.0, n)
    shape = x * np.exp(-x / (width * ell))
    base = SimState(0.0, gamma, {SOLID: T_solid, LIQUID: T_liquid})
    v0 = interface_velocity(cfg, base)
    v1 = interface_velocity(cfg, SimState(0.0, gamma, {SOLID: T_solid, LIQUID: T_liquid + shape}))
    return (target_velocity - v0) / (v1 - v0), shape


def initial_state(ref, sim, t0=0.0):
    """Reference profiles shifted to a perturbed interface.

    The interface starts at ``gamma_r(t0) + dgamma0``; both phases carry the
    moving-frame reference profile, and a liquid gradient bump produces the
    extra initial interface velocity ``dgamma_dot0``.
    """
    cfg = ref.cfg
    gamma = ref.interface(t0) + sim.dgamma0
    lo, hi = cfg.domain
    if not lo + sim.guard < gamma < hi - sim.guard:
        raise ParameterError("initial interface offset leaves the crucible")
    T = {}
    for ph in PHASES:
        p = cfg.phase(ph)
        ell = _phase_length(cfg, ph, gamma)
        zt = p.orientation * ell * np.linspace(0.0, 1.0, sim.nodes)
        T[ph] = ref.evaluate(ph, zt, t0, check=False)
        T[ph][0] = cfg.melting_temp
    if sim.dgamma_dot0 != 0.0:
        target = ref.traj.velocity(t0) + sim.dgamma_dot0
        g, shape = calibrate_velocity_bump(cfg, T[SOLID], T[LIQUID], gamma, target, sim.bump_width)
        T[LIQUID] = T[LIQUID] + g * shape
    return SimState(t0, gamma, T)


@dataclass
class RunLog:
    """Per-step record of a closed-loop run.

    Row ``n`` holds the state at ``t_n``; its heater fluxes are those applied
    during the step ending at ``t_n`` (the initial row holds the feedback
    evaluated on the initial state).
    """

    rows: list = field(default_factory=list)
    profiles: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    aborted: str = ""
    final_state: object = None

    COLUMNS = ("t", "gamma", "gamma_ref", "dgamma", "gamma_dot", "q_solid", "q_liquid",
               "l2_solid", "l2_liquid", "l2_solid_fixed", "l2_liquid_fixed", "enthalpy")

    def column(self, name):
        k = self.COLUMNS.index(name)
        return np.array([r[k] for r in self.rows])

    def write_csv(self, path, meta_path=None):
        with open(path, "w", newline="") as fh:
            fh.write("# vgf-runlog v1\n")
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([repr(float(v)) for v in r])
        if meta_path is not None:
            with open(meta_path, "w") as fh:
                json.dump(self.meta, fh, indent=2, sort_keys=True)
                fh.write("\n")

    def write_profiles(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("# vgf-profiles v1\n")
            w = csv.writer(fh)
            w.writerow(("t", "phase", "z", "T", "error"))
            for t, ph, z, T, e in self.profiles:
                for zz, TT, ee in zip(z, T, e):
                    w.writerow((repr(float(t)), ph, repr(float(zz)), repr(float(TT)), repr(float(ee))))


def _l2(x, e):
    order = np.argsort(x)
    x, e = x[order], e[order]
    f = e * e
    return math.sqrt(max(float(np.sum(0.5 * (f[1:] + f[:-1]) * np.diff(x))), 0.0))


def error_norms(ref, state, frame="moving"):
    """L2 norms of the temperature errors of both phases and ``dgamma``.

    ``frame="moving"`` compares with the reference attached to the measured
    interface, ``T(gamma + zt) - T_ref(zt)``; ``frame="fixed"`` with the
    reference in crucible coordinates, ``T(z) - T_ref(z - gamma_r)``.  The
    trapezoidal rule runs over the current extent of each phase.
    """
    z = node_positions(ref.cfg, state)
    out = {}
    for ph in PHASES:
        e = state.T[ph] - ref.samples(ph, z[ph], state.t, state.gamma, frame)
        out[ph] = _l2(np.abs(z[ph] - state.gamma), e)
    return out[SOLID], out[LIQUID], state.gamma - ref.interface(state.t)


def run_closed_loop(ref, sim, controller=None, state=None, t_end=None, callback=None):
    """March the plant with feedback (or feedforward) heater fluxes.

    Parameters
    ----------
    ref : ReferenceField
    sim : SimConfig
    controller : ControllerConfig or None
        None (or ``sim.feedforward_only``) applies the feedforward fluxes.
    state : SimState, optional
        Initial state; defaults to :func:`initial_state`.

    Returns
    -------
    RunLog
        On a plant or controller failure the log holds every completed step
        and ``aborted`` carries the message.
    """
    from .controller import PlantMeasurement, control_input, feedback_gains, feedforward_input

    cfg = ref.cfg
    state = state if state is not None else initial_state(ref, sim)
    t_end = sim.t_end if t_end is None else t_end
    runlog = RunLog(meta={"sim": asdict(sim)})
    n_steps = int(round((t_end - state.t) / sim.dt))
    closed = controller is not None and not sim.feedforward_only

    def record(st, q, gdot):
        l2s, l2l, dg = error_norms(ref, st, "moving")
        f2s, f2l, _ = error_norms(ref, st, "fixed")
        runlog.rows.append((st.t, st.gamma, ref.interface(st.t), dg, gdot, q[SOLID], q[LIQUID],
                            l2s, l2l, f2s, f2l, enthalpy(cfg, st)))

    def sources():
        if not closed:
            return {ph: (lambda t, g, z, ph=ph: (feedforward_input(ref, ph, t), np.zeros(z.size)))
                    for ph in PHASES}
        return {ph: (lambda t, g, z, ph=ph: feedback_gains(controller, ph, t, g, z)) for ph in PHASES}

    def profiles(st):
        z = node_positions(cfg, st)
        for ph in PHASES:
            e = st.T[ph] - ref.samples(ph, z[ph], st.t, st.gamma, "moving")
            runlog.profiles.append((st.t, ph, z[ph], st.T[ph].copy(), e))

    src = sources()
    try:
        z = node_positions(cfg, state)
        if closed:
            m = PlantMeasurement(state.t, state.gamma, z, state.T)
            q = {ph: control_input(m, controller, ph) for ph in PHASES}
        else:
            q = {ph: feedforward_input(ref, ph, state.t) for ph in PHASES}
    except VGFError as exc:
        runlog.aborted = f"{type(exc).__name__}: {exc}"
        runlog.final_state = state
        return runlog
    record(state, q, interface_velocity(cfg, state))
    for n in range(n_steps):
        if sim.profile_every and n % sim.profile_every == 0:
            profiles(state)
        try:
            state, info = step(cfg, state, src, sim.dt, sim)
        except VGFError as exc:  # keep the partial log
            runlog.aborted = f"{type(exc).__name__}: {exc}"
            log.error("run aborted at t=%g: %s", state.t, exc)
            break
        record(state, info.inputs, info.gamma_dot)
        if callback is not None:
            callback(state, info)
    runlog.final_state = state
    return runlog


def linearization_residual(ref, eps, t0=0.0, nodes=201, dt=0.1, amplitude=100.0):
    """Gap between one plant step and the linearized error system (K/s).

    The reference state at ``t0`` is perturbed by ``eps * phi`` in both
    phases, where ``phi = amplitude * sin(k x) + c x^2 (1 - 2x / (3 ell))``
    with ``k = pi / (2 ell)``; ``phi`` vanishes at the interface, has zero
    slope at the heater and ``c`` makes it compatible with the pinned
    interface temperature.  One step with the feedforward fluxes is compared
    with ``eps * (phi + dt * A phi)``, ``A`` the linear error operator, after
    removing the step of the unperturbed reference.  The remaining gap is
    the neglected product ``dgamma_dot * e_x`` and scales like ``eps**2``.
    """
    from .controller import feedforward_input, linear_error_rate

    cfg = ref.cfg
    gamma = ref.interface(t0)
    ell = {ph: _phase_length(cfg, ph, gamma) for ph in PHASES}
    k = {ph: math.pi / (2.0 * ell[ph]) for ph in PHASES}
    dgd = sum(cfg.kappa(ph) * cfg.phase(ph).orientation * amplitude * k[ph] for ph in PHASES)
    c = {}
    for ph in PHASES:
        p = cfg.phase(ph)
        gx = p.orientation * ref.evaluate(ph, np.zeros(1), t0, dz=1, check=False)[0]
        c[ph] = -p.orientation * dgd * gx / (2.0 * p.diffusivity)

    def phi(ph, x, d):
        kk, L, cc = k[ph], ell[ph], c[ph]
        if d == 0:
            return amplitude * np.sin(kk * x) + cc * x * x * (1.0 - 2.0 * x / (3.0 * L))
        if d == 1:
            return amplitude * kk * np.cos(kk * x) + cc * (2.0 * x - 2.0 * x * x / L)
        return -amplitude * kk * kk * np.sin(kk * x) + cc * (2.0 - 4.0 * x / L)

    sim = SimConfig(nodes=nodes, dt=dt, profile_every=0)
    q = {ph: feedforward_input(ref, ph, t0 + dt) for ph in PHASES}
    s = np.linspace(0.0, 1.0, nodes)

    def advance(scale):
        T = {}
        for ph in PHASES:
            x = ell[ph] * s
            T[ph] = ref.evaluate(ph, cfg.phase(ph).orientation * x, t0, check=False) \
                + scale * phi(ph, x, 0)
            T[ph][0] = cfg.melting_temp
        st, _ = step(cfg, SimState(t0, gamma, T), q, dt, sim)
        x1 = {ph: _phase_length(cfg, ph, st.gamma) * s for ph in PHASES}
        e = {ph: st.T[ph] - ref.evaluate(ph, cfg.phase(ph).orientation * x1[ph], t0 + dt,
                                          check=False) for ph in PHASES}
        return e, x1

    e0, _ = advance(0.0)
    e, x1 = advance(eps)
    rates, _ = linear_error_rate(ref, t0, x1, {ph: eps * phi(ph, x1[ph], 1) for ph in PHASES},
                                 {ph: eps * phi(ph, x1[ph], 2) for ph in PHASES})
    gap = 0.0
    for ph in PHASES:
        d = e[ph] - e0[ph] - eps * phi(ph, x1[ph], 0) - dt * rates[ph]
        gap = max(gap, float(np.max(np.abs(d))) / dt)
    return gap

"""Backstepping state feedback for one phase of the two-phase Stefan problem.

The error of a phase is ``e(z) = T(z) - T_ref(z - gamma)``, the reference
attached to the measured interface, expressed in the interface distance
``x = beta * (z - gamma)``.  The heater flux follows from imposing the
target boundary condition ``w_x(L) = nu w(L)`` on the transformed error

    e_x(L) = (k(L, L) + nu - v/(2 alpha)) e(L)
             + int_0^L (k_x - nu k)(L, xi) exp(v (xi - L) / (2 alpha)) e(xi) dxi,

    q = lambda * (dT_ref/dx(L) + e_x(L)),

with ``v = beta * dgamma_r/dt`` and ``L = beta * (z_b - gamma)``.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ParameterError
from .material import PHASES

__all__ = ["ControllerConfig", "PlantMeasurement", "ErrorState", "error_state", "hopf_cole",
           "control_input", "feedback_gains", "feedforward_input", "backstepping_transform",
           "linear_error_rate"]


@dataclass(frozen=True)
class ControllerConfig:
    """Design data of the feedback.

    Parameters
    ----------
    ref : ReferenceField
    banks : dict
        Phase name to :class:`~vgf_backstepping.kernel.KernelBank`.
    mu : float
        Target reaction coefficient (1/s), ``<= 0``.  The kernel banks must
        have been computed with the same value.
    nu : float
        Target boundary gain (1/m), ``<= 0``.
    step : float or None
        Quadrature step (m); defaults to the kernel grid step.
    frame : {"moving", "fixed"}
        Reference the error is taken against: ``"moving"`` uses
        ``T_ref(z - gamma)`` attached to the measured interface, ``"fixed"``
        uses ``T_ref(z - gamma_r)`` so that an interface offset shows up in
        the error.  The fixed variant feeds the offset back with the wrong
        sign whenever the melt reference is supercooled and is kept for
        comparison only.
    """

    ref: object
    banks: dict
    mu: float = -1e-2
    nu: float = 0.0
    step: float = None
    frame: str = "moving"

    def __post_init__(self):
        if self.frame not in ("fixed", "moving"):
            raise ParameterError(f"unknown error frame {self.frame!r}")
        if not self.mu <= 0:
            raise ParameterError(f"mu must be <= 0, got {self.mu}")
        if not self.nu <= 0:
            raise ParameterError(f"nu must be <= 0, got {self.nu}")
        if self.step is not None and not self.step > 0:
            raise ParameterError("quadrature step must be positive")

    def quad_step(self, phase):
        return self.step if self.step is not None else self.banks[phase].delta


@dataclass(frozen=True)
class PlantMeasurement:
    """Sampled temperature profiles of both phases.

    ``z[phase]`` holds crucible coordinates ordered from the interface to the
    heated boundary, ``T[phase]`` the matching temperatures.
    """

    t: float
    gamma: float
    z: dict = field(default_factory=dict)
    T: dict = field(default_factory=dict)

    def __post_init__(self):
        for ph in PHASES:
            if ph not in self.z or ph not in self.T:
                raise ParameterError(f"measurement lacks the {ph} profile")
            if np.shape(self.z[ph]) != np.shape(self.T[ph]) or np.size(self.z[ph]) < 2:
                raise ParameterError(f"{ph} profile needs matching coordinates with >= 2 samples")
            if not np.all(np.isfinite(self.T[ph])) or not np.all(np.isfinite(self.z[ph])):
                raise ParameterError(f"non-finite value in the {ph} measurement")
        if not math.isfinite(self.gamma) or not math.isfinite(self.t):
            raise ParameterError("non-finite interface position or time")


@dataclass(frozen=True)
class ErrorState:
    """Errors of one measurement: profiles over ``x`` per phase and ``dgamma``."""

    x: dict
    error: dict
    dgamma: float
    dgamma_dot: float


def _check_gamma(m, cfg):
    lo, hi = cfg.domain
    if not lo < m.gamma < hi:
        raise DomainError(f"interface position {m.gamma} outside the crucible", (lo, hi))


def error_state(m, ref, frame="moving"):
    """Temperature and interface errors of a measurement.

    The temperature error of each phase is ``T(z) - T_ref(z - gamma)``
    (``frame="moving"``) or ``T(z) - T_ref(z - gamma_r)`` (``"fixed"``),
    sampled at the measurement nodes and indexed by ``x = beta (z - gamma)``.
    ``dgamma_dot`` is the difference of the measured Stefan velocity (from
    one-sided second-order gradients of the samples) and the reference one.
    """
    cfg = ref.cfg
    _check_gamma(m, cfg)
    xs, errs, grads = {}, {}, {}
    for ph in PHASES:
        beta = cfg.phase(ph).orientation
        z = np.asarray(m.z[ph], dtype=float)
        T = np.asarray(m.T[ph], dtype=float)
        xs[ph] = beta * (z - m.gamma)
        errs[ph] = T - ref.samples(ph, z, m.t, m.gamma, frame)
        x = xs[ph]
        h1 = x[1] - x[0]
        if x.size > 2:
            # slope at x[0] of the quadratic through the first three samples
            h2 = x[2] - x[0]
            d1 = (T[1] - T[0]) / h1
            d2 = (T[2] - T[0]) / h2
            grads[ph] = (d1 * h2 - d2 * h1) / (h2 - h1)
        else:
            grads[ph] = (T[1] - T[0]) / h1
    vel = -(cfg.solid.conductivity * grads["solid"] + cfg.liquid.conductivity * grads["liquid"]) \
        / (cfg.melt_density * cfg.latent_heat)
    return ErrorState(xs, errs, m.gamma - ref.interface(m.t), vel - ref.traj.velocity(m.t))


def hopf_cole(profile, velocity, alpha, x, direction="forward"):
    """Weight a profile by ``psi = exp(-v x / (2 alpha))``.

    ``"forward"`` maps the error to ``profile / psi`` (the convection-free
    variable), ``"inverse"`` multiplies by ``psi``.
    """
    if not math.isfinite(velocity):
        raise ParameterError("reference velocity must be finite")
    w = np.exp(np.asarray(x, dtype=float) * velocity / (2.0 * alpha))
    if direction == "forward":
        return np.asarray(profile) * w
    if direction == "inverse":
        return np.asarray(profile) / w
    raise ParameterError(f"unknown direction {direction!r}")


def _midpoints(length, step):
    n = max(int(math.ceil(length / step - 1e-9)), 1)
    h = length / n
    return (np.arange(n) + 0.5) * h, h


def _phase_quantities(ref, phase, t, gamma):
    cfg = ref.cfg
    p = cfg.phase(phase)
    beta, alpha = p.orientation, p.diffusivity
    v = beta * ref.traj.velocity(t)
    L = beta * (p.boundary_coord - gamma)
    return beta, alpha, v, L


def feedforward_input(ref, phase, t):
    """Feedforward heater flux ``(lambda / beta) dT_ref/dz`` at the heated boundary."""
    p = ref.cfg.phase(phase)
    g = ref.fixed_frame(phase, np.array([p.boundary_coord]), t, dz=1)[0]
    return p.conductivity * p.orientation * g


def _interp_matrix(xq, x):
    """Matrix of piecewise linear interpolation from nodes ``x`` to ``xq``."""
    n = x.size
    k = np.clip(np.searchsorted(x, xq, side="right") - 1, 0, n - 2)
    f = np.clip((xq - x[k]) / (x[k + 1] - x[k]), 0.0, 1.0)
    P = np.zeros((xq.size, n))
    P[np.arange(xq.size), k] = 1.0 - f
    P[np.arange(xq.size), k + 1] += f
    return P


def _feedback_parts(cfg, phase, t, gamma, z):
    """Boundary gradient of the reference, linear error functional and reference samples."""
    ref = cfg.ref
    lo, hi = ref.cfg.domain
    if not lo < gamma < hi:
        raise DomainError(f"interface position {gamma} outside the crucible", (lo, hi))
    bank = cfg.banks[phase]
    beta, alpha, v, L = _phase_quantities(ref, phase, t, gamma)
    if L > bank.extent * (1 + 1e-12):
        raise DomainError(f"{phase} extent {L} exceeds the kernel grid", (0.0, bank.extent))
    z = np.asarray(z, dtype=float)
    x = beta * (z - gamma)
    order = np.argsort(x)
    xs = x[order]
    xi, h = _midpoints(L, cfg.quad_step(phase))
    k = bank.lookup(np.full(xi.size, L), xi, t)
    kx = bank.dx(L, xi, t)
    kLL = bank.lookup(L, L, t)
    weight = np.exp(v * (xi - L) / (2.0 * alpha))
    lin_sorted = (kLL + cfg.nu - v / (2.0 * alpha)) * _interp_matrix(np.array([L]), xs)[0]
    lin_sorted += h * ((kx - cfg.nu * k) * weight) @ _interp_matrix(xi, xs)
    lin = np.empty_like(lin_sorted)
    lin[order] = lin_sorted
    zb = np.array([ref.cfg.phase(phase).boundary_coord])
    T_ref = ref.samples(phase, z, t, gamma, cfg.frame)
    shift = ref.interface(t) if cfg.frame == "fixed" else gamma
    grad_ref = beta * ref.evaluate(phase, zb - shift, t, dz=1, check=False)[0]
    return grad_ref, lin, T_ref


def feedback_gains(cfg, phase, t, gamma, z):
    """Affine form ``q = offset + gains @ T`` of the feedback on nodes ``z``.

    ``z`` are crucible coordinates of the phase samples; the error between
    them is interpolated linearly.  The closed loop of the plant model uses
    this form to treat the feedback implicitly.

    Raises
    ------
    StalenessError
        The kernel bank does not cover ``t``.
    DomainError
        The interface left the crucible or the phase outgrew the kernel grid.
    """
    grad_ref, lin, T_ref = _feedback_parts(cfg, phase, t, gamma, z)
    lam = cfg.ref.cfg.phase(phase).conductivity
    return lam * (grad_ref - lin @ T_ref), lam * lin


def control_input(m, cfg, phase):
    """Heater flux of ``phase`` from the state feedback.

    Evaluated on the error ``T - T_ref`` directly, so that a zero error
    returns the feedforward flux without cancellation.

    Raises
    ------
    StalenessError
        The kernel bank does not cover ``m.t``.
    DomainError
        The interface left the crucible.
    """
    grad_ref, lin, T_ref = _feedback_parts(cfg, phase, m.t, m.gamma, m.z[phase])
    err = np.asarray(m.T[phase], dtype=float) - T_ref
    return float(cfg.ref.cfg.phase(phase).conductivity * (grad_ref + lin @ err))


def backstepping_transform(grid, theta, x):
    """Target state ``w(x_n) = theta(x_n) - int_0^{x_n} k(x_n, xi) theta(xi) dxi``.

    ``theta`` is sampled on the uniform grid ``x`` (starting at 0); the
    integral uses the trapezoidal rule on that grid.
    """
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    w = theta.copy()
    for n in range(1, x.size):
        k = grid.lookup(np.full(n + 1, x[n]), x[:n + 1])
        f = k * theta[:n + 1]
        w[n] -= np.sum(0.5 * (f[1:] + f[:-1]) * np.diff(x[:n + 1]))
    return w


def linear_error_rate(ref, t, x, e_x, e_xx):
    """Right-hand side of the linearized error system of both phases.

    With ``x = beta (z - gamma)`` and derivatives of the error taken in
    ``x``, the interface velocity error is
    ``dgamma_dot = sum_p kappa_p beta_p e_x,p(0)`` and each phase obeys

        e_t = alpha e_xx + v e_x + beta dgamma_dot dT_ref/dx,

    dropping the product ``dgamma_dot * e_x`` of the nonlinear system.

    Parameters
    ----------
    ref : ReferenceField
    t : float
    x, e_x, e_xx : dict
        Per phase: interface distances (``x[p][0] == 0``) and the first and
        second error derivatives there.

    Returns
    -------
    rates : dict
    dgamma_dot : float
    """
    cfg = ref.cfg
    dgamma_dot = sum(cfg.kappa(ph) * cfg.phase(ph).orientation * float(e_x[ph][0])
                     for ph in PHASES)
    rates = {}
    for ph in PHASES:
        beta, alpha = cfg.phase(ph).orientation, cfg.phase(ph).diffusivity
        v = beta * ref.traj.velocity(t)
        xs = np.asarray(x[ph], dtype=float)
        grad = beta * ref.evaluate(ph, beta * xs, t, dz=1, check=False)
        rates[ph] = alpha * np.asarray(e_xx[ph]) + v * np.asarray(e_x[ph]) + beta * dgamma_dot * grad
    return rates, dgamma_dot

"""Reference temperature field from the truncated power-series parametrisation.

Each phase is written in the moving frame ``zt = z - gamma_r(t)`` as

    T_ref(zt, t) = sum_i c_i(t) zt**i / i!

with ``c_0 = T_m``, ``c_1`` the interface gradient, and the recursion
``c_{i+2} = (dc_i/dt - v c_{i+1}) / alpha`` obtained from the moving-frame
heat equation.  All coefficients carry Taylor stacks in time, so every
consumer receives exact time derivatives.
"""
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import taylor
from .errors import CapabilityError, DomainError, ParameterError
from .material import LIQUID, PHASES, SOLID

__all__ = ["melt_gradient", "SeriesCoefficients", "build_coefficients", "ReferenceField"]

DEFAULT_ORDER = 20


def melt_gradient(solid_gradient, growth_rate, cfg):
    """Liquid interface gradient that satisfies the Stefan condition."""
    lam_l = cfg.liquid.conductivity
    if lam_l <= 0:
        raise ParameterError("liquid conductivity must be positive")
    return (cfg.solid.conductivity * solid_gradient
            - cfg.melt_density * cfg.latent_heat * growth_rate) / lam_l


@dataclass(frozen=True)
class SeriesCoefficients:
    """Series coefficients at one time instant.

    ``coeffs[phase]`` has shape ``(M + 1, n_time)``; row ``i`` is the Taylor
    stack of ``c_i``.  ``velocity`` is the Taylor stack of the reference
    interface velocity used in the recursion.
    """

    t: float
    order: int
    coeffs: dict
    velocity: np.ndarray
    diffusivity: dict

    @property
    def n_time(self):
        return self.velocity.shape[-1]


def _trim(a, n):
    if a.shape[-1] < n:
        raise CapabilityError(f"coefficient stack of length {a.shape[-1]} cannot supply {n} time orders")
    return a[:n]


def build_coefficients(traj, cfg, t, order=DEFAULT_ORDER, n_time=1):
    """Series coefficients of both phases at time ``t``.

    ``n_time`` is the number of Taylor entries (time derivative orders
    ``0 .. n_time - 1``) kept for every coefficient.
    """
    if order < 2:
        raise ParameterError("truncation order must be at least 2")
    depth = n_time + 1 + (order + 1) // 2
    y1, y2 = traj.stacks(t, depth)
    v = taylor.diff(y2)
    out = {}
    for phase in PHASES:
        p = cfg.phase(phase)
        alpha = p.diffusivity
        if phase == SOLID:
            c1 = y1.copy()
        else:
            c1 = (cfg.solid.conductivity * y1[:-1]
                  - cfg.melt_density * cfg.latent_heat * v) / cfg.liquid.conductivity
        c0 = np.zeros(depth)
        c0[0] = cfg.melting_temp
        cs = [c0, c1]
        for i in range(order - 1):
            dci = taylor.diff(cs[i])
            n = min(dci.shape[-1], cs[i + 1].shape[-1], v.shape[-1])
            if n < n_time:
                raise CapabilityError(
                    f"flat output supplies too few derivatives for c_{i + 2} at order {n_time - 1}")
            nxt = (dci[:n] - taylor.mul(v, cs[i + 1], n)) / alpha
            nxt[np.abs(nxt) < taylor.TINY] = 0.0
            cs.append(nxt)
        out[phase] = np.array([_trim(c, n_time) for c in cs])
    alphas = {ph: cfg.phase(ph).diffusivity for ph in PHASES}
    return SeriesCoefficients(t=t, order=order, coeffs=out, velocity=_trim(v, n_time), diffusivity=alphas)


def _power_matrix(z, order, dz):
    """Matrix ``P[k, i] = d^dz/dz^dz (z_k**i / i!)``."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    P = np.zeros((z.size, order + 1))
    for i in range(dz, order + 1):
        P[:, i] = z ** (i - dz) / math.factorial(i - dz)
    return P


class ReferenceField:
    """Evaluator of the reference temperature of both phases.

    Parameters
    ----------
    traj : FlatTrajectory
    cfg : StefanConfig
    order : int
        Truncation order ``M`` of the power series.
    """

    def __init__(self, traj, cfg, order=DEFAULT_ORDER):
        if order < 2:
            raise ParameterError("truncation order must be at least 2")
        self.traj = traj
        self.cfg = cfg
        self.order = order
        self._cached = lru_cache(maxsize=512)(self._coefficients)

    def _coefficients(self, t, n_time):
        return build_coefficients(self.traj, self.cfg, t, self.order, n_time)

    def coefficients(self, t, n_time=2):
        return self._cached(float(t), int(n_time))

    def interface(self, t):
        return self.traj.y2(t)

    def domain(self, phase, t):
        """Moving-frame interval ``[lo, hi]`` occupied by ``phase`` at ``t``."""
        zb = self.cfg.phase(phase).boundary_coord - self.interface(t)
        return (min(0.0, zb), max(0.0, zb))

    def _check(self, phase, z, t):
        lo, hi = self.domain(phase, t)
        z = np.asarray(z, dtype=float)
        tol = 1e-12 * max(1.0, hi - lo)
        if np.any(z < lo - tol) or np.any(z > hi + tol):
            raise DomainError(f"zt outside the {phase} domain at t={t}", (lo, hi))

    def stack(self, phase, z, t, n_time=1, dz=0, check=True):
        """Time stacks of ``d^dz T_ref / dzt^dz`` at fixed moving-frame points.

        Returns an array of shape ``(len(z), n_time)``.
        """
        if check:
            self._check(phase, z, t)
        sc = self.coefficients(t, n_time)
        P = _power_matrix(z, self.order, dz)
        return P @ sc.coeffs[phase]

    def evaluate(self, phase, z, t, dz=0, dt=0, check=True):
        """``d^dz d^dt T_ref(zt, t)`` at moving-frame points ``z``."""
        s = self.stack(phase, z, t, n_time=dt + 1, dz=dz, check=check)
        out = s[:, dt] * math.factorial(dt)
        return out if np.ndim(z) else float(out[0])

    def value(self, phase, z, t, check=True):
        return self.evaluate(phase, z, t, check=check)

    def gradient(self, phase, z, t, check=True):
        return self.evaluate(phase, z, t, dz=1, check=check)

    def rate(self, phase, z, t, check=True):
        return self.evaluate(phase, z, t, dt=1, check=check)

    def fixed_frame(self, phase, z, t, dz=0):
        """Reference in crucible coordinates, ``T_ref(z - gamma_r(t), t)``.

        Points beyond the reference interface are evaluated by the
        analytic continuation of the series.
        """
        zt = np.asarray(z, dtype=float) - self.interface(t)
        return self.evaluate(phase, zt, t, dz=dz, check=False)

    def samples(self, phase, z, t, gamma, frame="moving"):
        """Reference at crucible points ``z`` for an interface at ``gamma``.

        ``frame="moving"`` attaches the reference to ``gamma``,
        ``frame="fixed"`` to the planned interface ``gamma_r(t)``.
        """
        z = np.asarray(z, dtype=float)
        if frame == "fixed":
            return self.fixed_frame(phase, z, t)
        if frame == "moving":
            return self.evaluate(phase, z - gamma, t, check=False)
        raise ParameterError(f"unknown error frame {frame!r}")

    def residuals(self, phase, z, t):
        """Residuals of the moving-frame heat equation and of the Stefan condition."""
        sc = self.coefficients(t, 2)
        alpha = sc.diffusivity[phase]
        v = sc.velocity[0]
        dT = self.evaluate(phase, z, t, dt=1)
        Tz = self.evaluate(phase, z, t, dz=1)
        Tzz = self.evaluate(phase, z, t, dz=2)
        pde = dT - alpha * Tzz - v * Tz
        gs = sc.coeffs[SOLID][1, 0]
        gl = sc.coeffs[LIQUID][1, 0]
        stefan = v - (self.cfg.kappa(SOLID) * gs + self.cfg.kappa(LIQUID) * gl)
        return pde, stefan

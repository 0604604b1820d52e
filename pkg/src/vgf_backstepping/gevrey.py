"""Gevrey-class set-point transitions for the flat output.

The transition shape is the normalised integral of the bump
``h(s) = exp(-(s (1 - s))**(-omega))`` on ``0 < s < 1``, which is of Gevrey
order ``1 + 1/omega``.  Time derivatives of arbitrary order are produced by
Taylor-series recurrences on the composite ``exp(-u**(-omega))`` with the
quadratic ``u = s (1 - s)``.
"""
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate

from . import taylor
from .errors import CapabilityError, ParameterError

__all__ = ["MAX_ORDER", "bump_stack", "phi", "phi_stack", "GevreyTransition", "FlatTrajectory"]

MAX_ORDER = 160
# exp(-745) underflows to zero in double precision
_UNDERFLOW = 745.0


def _bump(s, omega):
    u = s * (1.0 - s)
    if u <= 0.0 or -omega * math.log(u) > math.log(_UNDERFLOW):
        return 0.0
    return float(np.exp(-u ** (-omega)))


@lru_cache(maxsize=32)
def _bump_integral(omega):
    val, _ = integrate.quad(_bump, 0.0, 1.0, args=(omega,), epsabs=0.0, epsrel=1e-13, limit=200)
    return val


@lru_cache(maxsize=4096)
def _bump_cumulative(s, omega):
    if s <= 0.0:
        return 0.0
    if s >= 1.0:
        return 1.0
    # integrate from the nearer end; the bump is symmetric about 1/2
    if s <= 0.5:
        val, _ = integrate.quad(_bump, 0.0, s, args=(omega,), epsabs=0.0, epsrel=1e-13, limit=200)
        return val / _bump_integral(omega)
    val, _ = integrate.quad(_bump, s, 1.0, args=(omega,), epsabs=0.0, epsrel=1e-13, limit=200)
    return 1.0 - val / _bump_integral(omega)


def bump_stack(s, omega, n):
    """Taylor stack (length ``n``) of the bump in the normalised time ``s``.

    Returns exact zeros inside the guard band where the bump underflows.
    """
    out = np.zeros(n)
    u0 = s * (1.0 - s)
    if n == 0 or u0 <= 0.0 or -omega * math.log(u0) > math.log(_UNDERFLOW):
        return out
    u = np.zeros(n)
    u[0] = u0
    if n > 1:
        u[1] = 1.0 - 2.0 * s
    if n > 2:
        u[2] = -1.0
    g = taylor.power(u, -omega)
    with np.errstate(over="ignore", invalid="ignore"):
        h = taylor.exp(-g)
    h[~np.isfinite(h)] = 0.0
    h[np.abs(h) < taylor.TINY] = 0.0
    return h


def phi_stack(s, omega, n):
    """Taylor stack of the normalised transition ``Phi`` in ``s``."""
    if n - 1 > MAX_ORDER:
        raise CapabilityError(f"derivative order {n - 1} exceeds supported maximum {MAX_ORDER}")
    out = np.zeros(n)
    out[0] = _bump_cumulative(float(s), omega)
    if n > 1:
        h = bump_stack(s, omega, n - 1)
        out[1:] = h / (np.arange(1, n) * _bump_integral(omega))
    return out


def phi(s, n=0, omega=1.1):
    """``n``-th derivative of the normalised transition at ``s``."""
    if n < 0:
        raise ParameterError("derivative order must be non-negative")
    if n > MAX_ORDER:
        raise CapabilityError(f"derivative order {n} exceeds supported maximum {MAX_ORDER}")
    return float(taylor.to_derivatives(phi_stack(s, omega, n + 1))[n])


@dataclass(frozen=True)
class GevreyTransition:
    """Smooth transition ``y0 -> ye`` over ``[t0, t0 + T]``."""

    start_value: float
    end_value: float
    start_time: float = 0.0
    duration: float = 1.0
    omega: float = 1.1

    def __post_init__(self):
        if not self.duration > 0:
            raise ParameterError("duration must be positive")
        if not self.omega >= 1.0:
            raise ParameterError("omega must be >= 1 so the Gevrey order stays <= 2")

    @property
    def gevrey_order(self):
        return 1.0 + 1.0 / self.omega

    def stack(self, t, n):
        """Taylor stack of ``y`` at ``t`` with ``n`` entries."""
        s = (t - self.start_time) / self.duration
        out = phi_stack(s, self.omega, n)
        with np.errstate(under="ignore"):
            scale = (self.end_value - self.start_value) * np.power(1.0 / self.duration, np.arange(n))
            out = out * scale
        out[0] += self.start_value
        out[np.abs(out) < taylor.TINY] = 0.0
        return out

    def __call__(self, t, n=0):
        """``n``-th time derivative at ``t``."""
        if n > MAX_ORDER:
            raise CapabilityError(f"derivative order {n} exceeds supported maximum {MAX_ORDER}")
        return float(taylor.to_derivatives(self.stack(t, n + 1))[n])


@dataclass(frozen=True)
class FlatTrajectory:
    """Reference flat output: interface solid gradient ``y1`` and position ``y2``."""

    y1: GevreyTransition
    y2: GevreyTransition
    max_derivative_order: int = MAX_ORDER

    def __post_init__(self):
        if not 0 <= self.max_derivative_order <= MAX_ORDER:
            raise ParameterError(f"max_derivative_order must lie in [0, {MAX_ORDER}]")

    def _check(self, n):
        if n > self.max_derivative_order:
            raise CapabilityError(
                f"derivative order {n} requested, trajectory supplies up to {self.max_derivative_order}")

    def __call__(self, t, n=0):
        """``(y1^(n)(t), y2^(n)(t))``."""
        self._check(n)
        return np.array([self.y1(t, n), self.y2(t, n)])

    def stacks(self, t, n):
        """Taylor stacks of ``y1`` and ``y2`` with ``n`` entries each."""
        self._check(n - 1)
        return self.y1.stack(t, n), self.y2.stack(t, n)

    @property
    def end_time(self):
        return max(self.y1.start_time + self.y1.duration, self.y2.start_time + self.y2.duration)

    def position(self, t):
        return self.y2(t)

    def velocity(self, t):
        return self.y2(t, 1)

    def acceleration(self, t):
        return self.y2(t, 2)

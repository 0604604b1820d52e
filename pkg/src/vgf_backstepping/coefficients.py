"""Coefficients of the Hopf-Cole transformed error system.

Every phase is handled in its own interface-distance coordinate
``x = beta * (z - gamma) >= 0``; in it the solid and the liquid share one
form, the kernel lives on ``0 <= xi <= x`` and the target boundary condition
reads ``w_x(x_b) = nu w(x_b)``.  All quantities are returned as Taylor stacks
in time (see :mod:`vgf_backstepping.taylor`) of shape ``(len(x), n_time)``.
"""
import numpy as np

from . import taylor
from .errors import CapabilityError, ParameterError
from .material import other_phase

__all__ = ["ConstantMu", "CoefficientField", "AnalyticCoefficients"]


class ConstantMu:
    """Spatially and temporally constant target reaction coefficient."""

    def __init__(self, value):
        self.value = float(value)

    def stack(self, x, n_time):
        out = np.zeros((np.size(x), n_time))
        out[:, 0] = self.value
        return out

    def __repr__(self):
        return f"ConstantMu({self.value!r})"


def _as_mu(mu):
    return mu if hasattr(mu, "stack") else ConstantMu(mu)


class CoefficientField:
    """Coefficients ``a``, ``b_bar``, ``c_bar`` of one phase at time ``t``.

    ``r = (2 acc x - v**2) / (4 alpha)`` with the oriented reference velocity
    ``v = beta * dgamma_r/dt``, ``psi = exp(-v x / (2 alpha))``,
    ``a = mu - r``, ``b_bar = kappa dT_ref/dx / psi`` and
    ``c_bar = -kappa_other dT_ref/dx / psi``.
    """

    def __init__(self, ref, phase, t, mu=0.0, n_time=1):
        self.ref = ref
        self.phase = phase
        self.t = float(t)
        self.mu = _as_mu(mu)
        self.n_time = int(n_time)
        if self.n_time < 1:
            raise ParameterError("n_time must be at least 1")
        cfg = ref.cfg
        p = cfg.phase(phase)
        self.alpha = p.diffusivity
        self.beta = p.orientation
        self.kappa = cfg.kappa(phase)
        self.kappa_other = cfg.kappa(other_phase(phase))
        # one extra order because the acceleration is the derivative of v
        sc = ref.coefficients(self.t, self.n_time + 1)
        self._v = self.beta * sc.velocity
        self._acc = taylor.diff(self._v)
        self._v = self._v[:self.n_time]

    @property
    def velocity(self):
        """Oriented reference velocity stack ``beta * dgamma_r/dt``."""
        return self._v

    def r(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))[:, None]
        v2 = taylor.mul(self._v, self._v, self.n_time)
        return (2.0 * x * self._acc[None, :] - v2[None, :]) / (4.0 * self.alpha)

    def psi_inv(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))[:, None]
        return taylor.exp(x * self._v[None, :] / (2.0 * self.alpha))

    def a(self, x):
        return self.mu.stack(x, self.n_time) - self.r(x)

    def grad_x(self, x):
        """Time stacks of ``dT_ref/dx`` at fixed interface distance."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return self.beta * self.ref.stack(self.phase, self.beta * x, self.t, self.n_time, dz=1, check=False)

    def bbar(self, x):
        return taylor.mul(self.kappa * self.grad_x(x), self.psi_inv(x), self.n_time)

    def cbar(self, x):
        return taylor.mul(-self.kappa_other * self.grad_x(x), self.psi_inv(x), self.n_time)


class AnalyticCoefficients:
    """Coefficients given by closed-form callables, mainly for verification.

    ``a_fn(x, n_time)`` and ``b_fn(x, n_time)`` return Taylor stacks of shape
    ``(len(x), n_time)``; ``c_fn`` defaults to zero.
    """

    def __init__(self, alpha, a_fn, b_fn=None, c_fn=None, n_time=1):
        if not alpha > 0:
            raise ParameterError("alpha must be positive")
        self.alpha = float(alpha)
        self.n_time = int(n_time)
        self._a = a_fn
        self._b = b_fn
        self._c = c_fn

    @classmethod
    def constant(cls, alpha, a0=0.0, b0=0.0, n_time=1):
        def const(value):
            def fn(x, n):
                out = np.zeros((np.size(x), n))
                out[:, 0] = value
                return out
            return fn
        return cls(alpha, const(a0), const(b0), n_time=n_time)

    def _call(self, fn, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if fn is None:
            return np.zeros((x.size, self.n_time))
        out = np.asarray(fn(x, self.n_time), dtype=float)
        if out.shape != (x.size, self.n_time):
            raise CapabilityError(f"coefficient callable returned shape {out.shape}")
        return out

    def a(self, x):
        return self._call(self._a, x)

    def bbar(self, x):
        return self._call(self._b, x)

    def cbar(self, x):
        return self._call(self._c, x)

"""Backstepping kernels on the normal-form triangle.

Kernels are computed in the interface-distance coordinates ``(x, xi)`` of
:mod:`vgf_backstepping.coefficients` and stored on the normal-form grid
``eta = x + xi``, ``sigma = x - xi`` with nodes ``k[i, j] = k(i d, j d)``,
``0 <= j <= N_sigma`` and ``j <= i <= N_eta - j``.

Two independent routes are provided: the explicit lower-sum scheme with all
kernel time derivatives eliminated recursively, and successive
approximations of the integral form evaluated with trapezoidal quadrature on
a finer grid.
"""
import bisect
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import taylor
from .errors import CapabilityError, DivergenceError, DomainError, ParameterError, StalenessError

__all__ = [
    "build_kernel_bank",
    "kernel_dx",
    "KernelGrid",
    "KernelBank",
    "ThetaMap",
    "grid_size",
    "solve_kernel_midpoint",
    "solve_kernel_successive",
    "first_iterate",
    "kernel_lookup",
    "coupling_field",
    "required_derivative_order",
    "max_derivative_order",
]

log = logging.getLogger(__name__)

SCHEMES = ("lower", "trapezoidal")
ZETA0_RULES = ("exact", "paper")


def grid_size(extent, delta):
    """``N_sigma`` for a step ``delta``; the step must divide the extent."""
    if not delta > 0:
        raise ParameterError("step width must be positive")
    n = int(round(extent / delta))
    if n < 1 or abs(n * delta - extent) > 1e-9 * extent:
        raise ParameterError(f"step {delta} does not divide the extent {extent}")
    return n


def required_derivative_order(i, j):
    """Highest time derivative of ``a`` and ``b_bar`` needed for node ``(i, j)``."""
    if not (0 <= j <= i):
        raise DomainError(f"({i}, {j}) is not a triangular index")
    return j


def max_derivative_order(n_sigma):
    """Derivative order needed for a complete grid with ``n_sigma`` steps."""
    return n_sigma - 1


@dataclass(frozen=True)
class KernelGrid:
    """Kernel values of one phase at one time instant.

    ``values`` has shape ``(N_eta + 1, N_sigma + 1)`` with NaN outside the
    triangle; ``stacks`` optionally holds the Taylor stacks in time.
    """

    t: float
    delta: float
    n_sigma: int
    values: np.ndarray
    alpha: float = float("nan")
    phase: str = ""
    scheme: str = "lower"
    stacks: np.ndarray = field(default=None, repr=False)

    @cached_property
    def filled(self):
        """``values`` with zeros outside the triangle, for interpolation."""
        return np.nan_to_num(self.values)

    @property
    def n_eta(self):
        return 2 * self.n_sigma

    @property
    def extent(self):
        return self.n_sigma * self.delta

    def node(self, i, j):
        if not (0 <= j <= self.n_sigma and j <= i <= self.n_eta - j):
            raise DomainError(f"node ({i}, {j}) outside the triangle")
        return float(self.values[i, j])

    def lookup(self, x, xi):
        return kernel_lookup(self, x, xi)

    def nodes(self):
        """Iterate over ``(i, j, eta, sigma, value)`` of all triangle nodes."""
        for j in range(self.n_sigma + 1):
            for i in range(j, self.n_eta - j + 1):
                yield i, j, i * self.delta, j * self.delta, float(self.values[i, j])


def _triangle_mask(n_sigma):
    n_eta = 2 * n_sigma
    i = np.arange(n_eta + 1)[:, None]
    j = np.arange(n_sigma + 1)[None, :]
    return (j <= i) & (i <= n_eta - j)


def _flush(a):
    small = (a != 0.0) & (np.abs(a) < taylor.TINY)
    n = int(np.count_nonzero(small))
    if n:
        a[small] = 0.0
    return n


def _check_orders(coeffs, n_sigma, allow_truncation):
    need = max_derivative_order(n_sigma)
    have = coeffs.n_time - 1
    if have < need:
        if not allow_truncation:
            j = have + 1
            raise CapabilityError(
                f"node ({j + 1}, {j}) requires derivative order {j} of a and b_bar, "
                f"coefficients supply up to order {have}")
        log.warning("kernel derivative chains truncated at order %d (grid needs %d)", have, need)


def solve_kernel_midpoint(coeffs, delta, extent, scheme="lower", zeta0_rule="exact",
                          allow_truncation=False, keep_stacks=False, t=float("nan"), phase=""):
    """Explicit grid scheme for the kernel with recursive time-derivative elimination.

    Each node is carried as a Taylor stack in time.  The time derivatives of
    the kernel that enter the lower sums are therefore available exactly, and
    the whole grid is a function of the coefficient stacks only.

    Parameters
    ----------
    coeffs : CoefficientField or AnalyticCoefficients
        Needs ``alpha``, ``n_time`` and stack evaluators ``a(x)``, ``bbar(x)``.
    delta : float
        Uniform step in both normal-form directions.
    extent : float
        Maximal phase extent; ``delta`` must divide it.
    scheme : {"lower", "trapezoidal"}
        Quadrature of the integral form.  ``"lower"`` is the explicit
        left-endpoint scheme; ``"trapezoidal"`` is implicit in the new column
        with a small linear solve per node in its Taylor entries.
    zeta0_rule : {"exact", "paper"}
        Discretisation of the integral condition on ``xi = 0``: ``"exact"``
        integrates along the line of constant ``x``, ``"paper"`` reproduces
        the line of constant ``eta`` used in the published scheme.
    """
    if scheme not in SCHEMES:
        raise ParameterError(f"unknown scheme {scheme!r}")
    if zeta0_rule not in ZETA0_RULES:
        raise ParameterError(f"unknown zeta0_rule {zeta0_rule!r}")
    n_sigma = grid_size(extent, delta)
    _check_orders(coeffs, n_sigma, allow_truncation)
    if scheme == "trapezoidal":
        K = _trapezoidal(coeffs, delta, n_sigma, zeta0_rule)
    else:
        K = _lower_sums(coeffs, delta, n_sigma, zeta0_rule)
    # adding +0.0 turns negative zeros from the linear solves into +0.0
    values = np.where(_triangle_mask(n_sigma), K[:, :, 0] + 0.0, np.nan)
    return KernelGrid(t=float(getattr(coeffs, "t", t)), delta=delta, n_sigma=n_sigma, values=values,
                      alpha=coeffs.alpha, phase=getattr(coeffs, "phase", phase), scheme=scheme,
                      stacks=K if keep_stacks else None)


def _half_grid(coeffs, delta, n_sigma):
    xh = np.arange(2 * n_sigma + 1) * (delta / 2.0)
    return np.asarray(coeffs.a(xh), dtype=float), np.asarray(coeffs.bbar(xh), dtype=float)


def _diag_term(K, B, j, Lj, delta, alpha, rule):
    if j == 0:
        return -B[0, :Lj] / alpha
    if rule == "exact":
        p = np.arange(1, j + 1)
        prod = taylor.mul(B[2 * p, :Lj], K[j + p, j - p, :Lj], Lj)
    else:
        n = np.arange(j)
        prod = taylor.mul(B[j + n, :Lj], K[j, n, :Lj], Lj)
    return (delta * prod.sum(axis=0) - B[2 * j, :Lj]) / alpha


def _lower_sums(coeffs, delta, n_sigma, rule):
    alpha = coeffs.alpha
    n_eta = 2 * n_sigma
    A, B = _half_grid(coeffs, delta, n_sigma)
    L = A.shape[1]
    K = np.zeros((n_eta + 1, n_sigma + 1, L))
    # R[i] = sum over finished columns m and rows n < i of F(n, m)
    R = np.zeros((n_eta + 1, L))
    SA = np.zeros((n_eta + 2, L))
    SA[1:] = np.cumsum(A, axis=0)
    c1 = delta / (4.0 * alpha)
    c2 = delta * delta / (4.0 * alpha)
    flushed = 0
    for j in range(n_sigma + 1):
        Lj = max(L - j, 1)
        rows = np.arange(j, n_eta - j + 1)
        D = _diag_term(K, B, j, Lj, delta, alpha, rule)
        col = D[None, :] + c1 * (SA[rows, :Lj] - SA[j, :Lj]) + c2 * (R[rows, :Lj] - R[j, :Lj])
        flushed += _flush(col)
        K[rows, j, :Lj] = col
        if j == n_sigma or Lj < 2:
            continue
        F = taylor.diff(col) - taylor.mul(A[rows - j, :Lj], col, Lj - 1)
        cum = np.cumsum(F, axis=0)
        # rows i > j receive F(j..i-1, j)
        R[j + 1:n_eta - j + 1, :Lj - 1] += cum[:-1]
    if flushed:
        log.debug("flushed %d stack entries below %g", flushed, taylor.TINY)
    return K


def _trapezoidal(coeffs, delta, n_sigma, rule):
    """Trapezoidal variant of the grid scheme.

    The current node enters its own right-hand side, both directly and
    through its time derivative, so each node solves a small linear system
    in its Taylor entries (the highest order is truncated to zero).
    """
    alpha = coeffs.alpha
    n_eta = 2 * n_sigma
    A, B = _half_grid(coeffs, delta, n_sigma)
    L = A.shape[1]
    K = np.zeros((n_eta + 1, n_sigma + 1, L))
    G = []
    for j in range(n_sigma + 1):
        Lj = max(L - j, 1)
        rows = np.arange(j, n_eta - j + 1)
        if j == 0:
            D = -B[0, :Lj] / alpha
        else:
            if rule == "exact":
                p = np.arange(1, j + 1)
                w = np.ones(j)
                w[-1] = 0.5
                prod = taylor.mul(B[2 * p, :Lj], K[j + p, j - p, :Lj], Lj) * w[:, None]
                self_w = 0.5 * delta * B[0, :Lj]
            else:
                n = np.arange(j)
                w = np.ones(j)
                w[0] = 0.5
                prod = taylor.mul(B[j + n, :Lj], K[j, n, :Lj], Lj) * w[:, None]
                self_w = 0.5 * delta * B[2 * j, :Lj]
            rhs = (delta * prod.sum(axis=0) - B[2 * j, :Lj]) / alpha
            D = _solve_scalar_series(rhs, self_w / alpha)
        col = np.zeros((len(rows), Lj))
        gcol = np.zeros((len(rows), Lj))
        col[0] = D
        gcol[0] = _g(D, A[0, :Lj])
        if j > 0:
            wm = np.ones(j)
            wm[0] = 0.5
            inner_prev = delta * sum(wm[m] * G[m][rows, :Lj] for m in range(j))
            half = 0.5 * delta
        else:
            inner_prev = np.zeros((len(rows), Lj))
            half = 0.0
        a_rows = A[rows, :Lj]
        aint = np.zeros((len(rows), Lj))
        aint[1:] = np.cumsum(0.5 * delta * (a_rows[:-1] + a_rows[1:]), axis=0)
        shift = np.diag(np.arange(1.0, Lj), 1)
        gamma = delta * half / (8.0 * alpha)
        acc = 0.5 * (inner_prev[0] + half * gcol[0])
        for idx in range(1, len(rows)):
            a_loc = A[idx, :Lj]
            c = D + aint[idx] / (4.0 * alpha) + delta / (4.0 * alpha) * (acc + 0.5 * inner_prev[idx])
            if gamma:
                toep = np.zeros((Lj, Lj))
                for d in range(Lj):
                    toep[np.arange(d, Lj), np.arange(0, Lj - d)] = a_loc[d]
                M = np.eye(Lj) - gamma * (shift - toep)
                u = np.linalg.solve(M, c)
            else:
                u = c
            col[idx] = u
            gcol[idx] = _g(u, a_loc)
            acc = acc + inner_prev[idx] + half * gcol[idx]
        _flush(col)
        K[rows, j, :Lj] = col
        gfull = np.zeros((n_eta + 1, Lj))
        gfull[rows] = gcol
        G.append(gfull)
    return K


def _solve_scalar_series(rhs, c):
    """Solve ``D = rhs + c * D`` for the Taylor stack ``D`` (Cauchy product)."""
    n = rhs.shape[0]
    D = np.zeros(n)
    for l in range(n):
        s = rhs[l] + (np.dot(c[1:l + 1], D[l - 1::-1][:l]) if l else 0.0)
        D[l] = s / (1.0 - c[0])
    return D


def _g(k, a):
    """Stack of ``dk/dt - a k`` with the missing top derivative set to zero."""
    out = -taylor.mul(a, k, k.shape[-1])
    out[..., :-1] += taylor.diff(k)
    return out


def kernel_lookup(grid, x, xi):
    """Kernel ``k(x, xi)`` by piecewise linear interpolation on the triangle.

    Interior cells are interpolated bilinearly; cells cut by the triangle
    boundary use the linear interpolant of their three valid corners.
    """
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    x, xi = np.broadcast_arrays(x, xi)
    tol = 1e-12 * grid.extent
    if np.any(xi < -tol) or np.any(xi > x + tol) or np.any(x > grid.extent + tol):
        raise DomainError("point outside the kernel triangle 0 <= xi <= x <= extent",
                          (0.0, grid.extent))
    eta = np.clip((x + xi) / grid.delta, 0.0, grid.n_eta)
    sig = np.clip((x - xi) / grid.delta, 0.0, grid.n_sigma)
    j0 = np.minimum(np.floor(sig).astype(int), grid.n_sigma - 1)
    i0 = np.minimum(np.floor(eta).astype(int), grid.n_eta - 1)
    i0 = np.maximum(i0, j0)
    fe = eta - i0
    fs = sig - j0
    V = grid.filled
    k00 = V[i0, j0]
    k10 = V[i0 + 1, j0]
    k11 = V[np.minimum(i0 + 1, grid.n_eta), np.minimum(j0 + 1, grid.n_sigma)]
    k01 = V[i0, np.minimum(j0 + 1, grid.n_sigma)]
    diag = i0 == j0
    top = (i0 + j0 + 2 > grid.n_eta) & ~diag
    bil = ~diag & ~top
    out = np.empty(eta.shape)
    out[diag] = (k00 + fe * (k10 - k00) + fs * (k11 - k10))[diag]
    out[top] = (k00 + fe * (k10 - k00) + fs * (k01 - k00))[top]
    out[bil] = ((1 - fe) * (1 - fs) * k00 + fe * (1 - fs) * k10
                + (1 - fe) * fs * k01 + fe * fs * k11)[bil]
    return out if out.ndim else float(out)


def kernel_dx(grid, x, xi):
    """``dk/dx`` at fixed ``xi`` by a one-sided three-point stencil of width ``delta``.

    The forward stencil is used while it stays on the grid, the backward one
    near the end of the maximal extent.
    """
    xi = np.asarray(xi, dtype=float)
    h = grid.delta
    if x + 2 * h <= grid.extent * (1 + 1e-12):
        k0 = kernel_lookup(grid, x, xi)
        k1 = kernel_lookup(grid, x + h, xi)
        k2 = kernel_lookup(grid, x + 2 * h, xi)
        return (-3.0 * k0 + 4.0 * k1 - k2) / (2.0 * h)
    k0 = kernel_lookup(grid, x, xi)
    k1 = kernel_lookup(grid, x - h, np.minimum(xi, x - h))
    k2 = kernel_lookup(grid, x - 2 * h, np.minimum(xi, x - 2 * h))
    return (3.0 * k0 - 4.0 * k1 + k2) / (2.0 * h)


def coupling_field(grid, coeffs, x):
    """Residual cross-phase coupling ``d(x) = int_0^x c_bar k dxi - c_bar(x)``.

    Midpoint quadrature with step ``grid.delta``.
    """
    x = float(x)
    if not 0 <= x <= grid.extent * (1 + 1e-12):
        raise DomainError("x outside the kernel extent", (0.0, grid.extent))
    cx = coeffs.cbar(np.array([x]))[0, 0]
    n = int(math.ceil(x / grid.delta - 1e-9))
    if n == 0:
        return -cx
    h = x / n
    xi = (np.arange(n) + 0.5) * h
    c = coeffs.cbar(xi)[:, 0]
    return float(h * np.sum(c * kernel_lookup(grid, np.full(n, x), xi)) - cx)


class KernelBank:
    """Kernel grids of one phase on a time grid, linear in time in between."""

    def __init__(self, grids):
        if not grids:
            raise ParameterError("empty kernel bank")
        self.grids = sorted(grids, key=lambda g: g.t)
        self.times = [g.t for g in self.grids]
        g0 = self.grids[0]
        self.delta = g0.delta
        self.extent = g0.extent
        self.phase = g0.phase

    def _bracket(self, t):
        t0, t1 = self.times[0], self.times[-1]
        span = max(t1 - t0, 1.0)
        if t < t0 - 1e-9 * span or t > t1 + 1e-9 * span:
            raise StalenessError(f"no kernel data for t={t} (covered [{t0}, {t1}])")
        if len(self.grids) == 1:
            return self.grids[0], self.grids[0], 0.0
        k = min(max(bisect.bisect_right(self.times, t) - 1, 0), len(self.times) - 2)
        ta, tb = self.times[k], self.times[k + 1]
        w = min(max((t - ta) / (tb - ta), 0.0), 1.0)
        return self.grids[k], self.grids[k + 1], w

    def lookup(self, x, xi, t):
        ga, gb, w = self._bracket(t)
        va = kernel_lookup(ga, x, xi)
        if w == 0.0:
            return va
        return (1 - w) * va + w * kernel_lookup(gb, x, xi)

    def dx(self, x, xi, t):
        ga, gb, w = self._bracket(t)
        va = kernel_dx(ga, x, xi)
        if w == 0.0:
            return va
        return (1 - w) * va + w * kernel_dx(gb, x, xi)


class ThetaMap:
    """Memoised recursion for single kernel nodes.

    ``node(i, j, l)`` is the ``l``-th Taylor entry in time of ``k[i, j]``
    obtained by substituting all kernel time derivatives recursively until
    only entries of ``a`` and ``b_bar`` remain.  The orders of ``a`` and
    ``b_bar`` actually read are recorded in ``a_orders`` and ``b_orders``.
    Uses the lower-sum scheme.
    """

    def __init__(self, coeffs, delta, extent, zeta0_rule="exact"):
        self.alpha = coeffs.alpha
        self.delta = delta
        self.n_sigma = grid_size(extent, delta)
        self.rule = zeta0_rule
        self._A, self._B = _half_grid(coeffs, delta, self.n_sigma)
        self.a_orders = set()
        self.b_orders = set()
        self._memo = {}

    def reset_counters(self):
        self.a_orders.clear()
        self.b_orders.clear()
        self._memo.clear()

    def _a(self, p, d):
        if d >= self._A.shape[1]:
            raise CapabilityError(f"derivative order {d} of a not available")
        self.a_orders.add(d)
        return self._A[p, d]

    def _b(self, p, d):
        if d >= self._B.shape[1]:
            raise CapabilityError(f"derivative order {d} of b_bar not available")
        self.b_orders.add(d)
        return self._B[p, d]

    def node(self, i, j, l=0):
        key = (i, j, l)
        if key in self._memo:
            return self._memo[key]
        if not (0 <= j <= self.n_sigma and j <= i <= 2 * self.n_sigma - j):
            raise DomainError(f"node ({i}, {j}) outside the triangle")
        alpha, d = self.alpha, self.delta
        # value on xi = 0
        if j == 0:
            val = -self._b(0, l) / alpha
        else:
            s = 0.0
            if self.rule == "exact":
                for p in range(1, j + 1):
                    s += sum(self._b(2 * p, q) * self.node(j + p, j - p, l - q) for q in range(l + 1))
            else:
                for n in range(j):
                    s += sum(self._b(j + n, q) * self.node(j, n, l - q) for q in range(l + 1))
            val = (d * s - self._b(2 * j, l)) / alpha
        if i > j:
            val += d / (4 * alpha) * sum(self._a(n, l) for n in range(j, i))
            dbl = 0.0
            for n in range(j, i):
                for m in range(j):
                    dbl += (l + 1) * self.node(n, m, l + 1)
                    dbl -= sum(self._a(n - m, q) * self.node(n, m, l - q) for q in range(l + 1))
            val += d * d / (4 * alpha) * dbl
        self._memo[key] = val
        return val


def first_iterate(coeffs, eta, sigma, n_quad=2001):
    """First successive approximation ``(1/4a) int_sigma^eta a(r/2) dr - b_bar(sigma)/a``.

    Only the value (time order 0) is returned.
    """
    r = np.linspace(sigma, eta, n_quad)
    a = coeffs.a(r / 2.0)[:, 0]
    integral = float(np.sum(0.5 * (a[1:] + a[:-1]) * np.diff(r)))
    return integral / (4 * coeffs.alpha) - coeffs.bbar(np.array([sigma]))[0, 0] / coeffs.alpha


def solve_kernel_successive(coeffs, extent, points=None, n_sigma=64, tol=1e-12, max_iter=500,
                            zeta0_rule="exact"):
    """Successive approximations of the integral form of the kernel equations.

    The iterates ``K^n`` are summed until the sup-norm increment drops below
    ``tol`` (relative to the current sup-norm).  Integrals are evaluated by
    the trapezoidal rule on a normal-form grid with ``n_sigma`` steps; time
    derivatives of the iterates propagate through Taylor stacks with the
    missing top order set to zero.

    Returns
    -------
    values : ndarray or KernelGrid
        Kernel values at ``points`` (sequence of ``(eta, sigma)``), or the
        full oracle grid if ``points`` is None.
    iterations : int
    """
    delta = extent / n_sigma
    n_eta = 2 * n_sigma
    alpha = coeffs.alpha
    A, B = _half_grid(coeffs, delta, n_sigma)
    L = A.shape[1]
    mask = _triangle_mask(n_sigma)
    rows = np.arange(n_eta + 1)[:, None]
    cols = np.arange(n_sigma + 1)[None, :]
    aidx = np.clip(rows - cols, 0, n_eta)
    # first iterate
    a_int = np.zeros((n_eta + 1, L))
    a_int[1:] = np.cumsum(0.5 * delta * (A[:-1] + A[1:]), axis=0)
    K1 = (a_int[:, None, :] - a_int[np.arange(n_sigma + 1)][None, :, :]) / (4 * alpha) \
        - B[2 * np.arange(n_sigma + 1)][None, :, :] / alpha
    K1 = np.where(mask[:, :, None], K1, 0.0)
    total = K1.copy()
    term = K1
    it = 1
    inc = np.max(np.abs(term[..., 0]))
    while True:
        scale = max(np.max(np.abs(total[..., 0])), 1e-300)
        if inc <= tol * scale:
            break
        if it >= max_iter:
            raise DivergenceError(f"successive approximations did not converge in {max_iter} iterations",
                                  last_increment=inc)
        term = _picard_linear(term, A, B, aidx, mask, delta, alpha, zeta0_rule)
        total += term
        it += 1
        inc = np.max(np.abs(term[..., 0]))
        if not np.isfinite(inc):
            raise DivergenceError("successive approximations diverged", last_increment=inc)
    grid = KernelGrid(t=float(getattr(coeffs, "t", float("nan"))), delta=delta, n_sigma=n_sigma,
                      values=np.where(mask, total[..., 0], np.nan), alpha=alpha,
                      phase=getattr(coeffs, "phase", ""), scheme="successive")
    if points is None:
        return grid, it
    pts = np.asarray(points, dtype=float)
    eta, sig = pts[:, 0], pts[:, 1]
    vals = kernel_lookup(grid, (eta + sig) / 2.0, (eta - sig) / 2.0)
    return vals, it


def _picard_linear(K, A, B, aidx, mask, delta, alpha, rule):
    """Linear part of the integral operator applied to the previous iterate."""
    n_eta, n1, L = K.shape
    n_sigma = n1 - 1
    G = -taylor.mul(A[aidx], K, L)
    G[..., :-1] += taylor.diff(K)
    G = np.where(mask[:, :, None], G, 0.0)
    # inner integral over s in [0, sigma]
    inner = np.zeros_like(G)
    inner[:, 1:] = np.cumsum(0.5 * delta * (G[:, :-1] + G[:, 1:]), axis=1)
    # outer integral over r in [sigma, eta]
    outer_c = np.zeros_like(inner)
    outer_c[1:] = np.cumsum(0.5 * delta * (inner[:-1] + inner[1:]), axis=0)
    j = np.arange(n_sigma + 1)
    dbl = outer_c - outer_c[j, j][None, :, :]
    # integral condition on xi = 0
    Z = np.zeros((n_sigma + 1, L))
    for jj in range(1, n_sigma + 1):
        if rule == "exact":
            p = np.arange(jj + 1)
            vals = taylor.mul(B[2 * p], K[jj + p, jj - p], L)
        else:
            n = np.arange(jj + 1)
            vals = taylor.mul(B[jj + n], K[jj, n], L)
        w = np.full(jj + 1, delta)
        w[0] = w[-1] = 0.5 * delta
        Z[jj] = (w[:, None] * vals).sum(axis=0)
    out = Z[None, :, :] / alpha + dbl / (4 * alpha)
    return np.where(mask[:, :, None], out, 0.0)


def build_kernel_bank(ref, phase, mu, n_sigma, times, scheme="lower", zeta0_rule="exact",
                      threads=1, allow_truncation=False):
    """Kernel grids of ``phase`` at the sample ``times`` on the maximal extent.

    Builds at distinct times are independent and run on ``threads`` workers;
    the result does not depend on the thread count.
    """
    from .coefficients import CoefficientField

    extent = ref.cfg.extent
    delta = extent / n_sigma
    n_time = max_derivative_order(n_sigma) + 1

    def build(t):
        c = CoefficientField(ref, phase, t, mu=mu, n_time=n_time)
        return solve_kernel_midpoint(c, delta, extent, scheme=scheme, zeta0_rule=zeta0_rule,
                                     allow_truncation=allow_truncation)

    times = [float(t) for t in times]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            grids = list(pool.map(build, times))
    else:
        grids = [build(t) for t in times]
    return KernelBank(grids)

"""Truncated Taylor-series arithmetic in time.

A *stack* is a 1-d array ``s`` whose entry ``s[l]`` holds ``f^(l)(t) / l!``.
Products become Cauchy convolutions and differentiation becomes a shift, so
time derivatives propagate exactly through the feedforward and kernel
recursions without any numerical differentiation.
"""
import math

import numpy as np

__all__ = [
    "mul",
    "diff",
    "exp",
    "power",
    "to_derivatives",
    "from_derivatives",
    "TINY",
]

# Magnitude below which stack entries are flushed to zero.
TINY = 1e-300


def mul(a, b, n=None):
    """Cauchy product of two stacks, truncated to ``n`` terms.

    Works on the last axis, so stacks of many points may be multiplied at once.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if n is None:
        n = min(a.shape[-1], b.shape[-1])
    shape = np.broadcast_shapes(a.shape[:-1], b.shape[:-1]) + (n,)
    out = np.zeros(shape)
    for d in range(min(n, a.shape[-1])):
        m = min(n - d, b.shape[-1])
        if m <= 0:
            break
        out[..., d:d + m] += a[..., d:d + 1] * b[..., :m]
    return out


def diff(a):
    """Stack of the time derivative (one entry shorter)."""
    a = np.asarray(a, dtype=float)
    k = np.arange(1, a.shape[-1])
    return a[..., 1:] * k


def exp(g):
    """Stack of ``exp(g)`` from the stack of ``g``."""
    g = np.asarray(g, dtype=float)
    n = g.shape[-1]
    out = np.zeros_like(g)
    out[..., 0] = np.exp(g[..., 0])
    kg = g * np.arange(n)
    for m in range(1, n):
        out[..., m] = np.sum(kg[..., 1:m + 1] * out[..., m - 1::-1][..., :m], axis=-1) / m
    return out


def power(u, p):
    """Stack of ``u**p`` for real ``p``; requires ``u[0] > 0``."""
    u = np.asarray(u, dtype=float)
    n = u.shape[-1]
    out = np.zeros_like(u)
    out[..., 0] = u[..., 0] ** p
    for m in range(1, n):
        k = np.arange(1, m + 1)
        acc = np.sum((p * k - (m - k)) * u[..., 1:m + 1] * out[..., m - 1::-1][..., :m], axis=-1)
        out[..., m] = acc / (m * u[..., 0])
    return out


def to_derivatives(s):
    """Convert a stack to plain derivatives ``f^(l)``."""
    s = np.asarray(s, dtype=float)
    fac = np.array([math.factorial(l) for l in range(s.shape[-1])], dtype=float)
    return s * fac


def from_derivatives(d):
    """Convert plain derivatives ``f^(l)`` to a stack."""
    d = np.asarray(d, dtype=float)
    fac = np.array([math.factorial(l) for l in range(d.shape[-1])], dtype=float)
    return d / fac

"""Backstepping tracking control of the two-phase Stefan problem."""
__version__ = "0.1.0"

"""Exception hierarchy shared by all modules."""


class VGFError(Exception):
    """Base class for all package errors."""


class ParameterError(VGFError, ValueError):
    """Invalid physical or numerical parameter."""


class CapabilityError(VGFError):
    """A requested derivative order exceeds what the data can supply."""


class DomainError(VGFError, ValueError):
    """A query point lies outside the valid domain."""

    def __init__(self, msg, interval=None):
        super().__init__(msg if interval is None else f"{msg} (valid interval {interval})")
        self.interval = interval


class DivergenceError(VGFError):
    """An iteration failed to converge."""

    def __init__(self, msg, last_increment=None):
        super().__init__(msg)
        self.last_increment = last_increment


class StalenessError(VGFError):
    """Kernel data does not cover the requested time."""


class SimulationAbort(VGFError):
    """The plant simulation left its admissible state space."""

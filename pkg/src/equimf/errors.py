"""Exception types shared across the package."""


class EquiMFError(Exception):
    """Base class for all package errors."""


class InvalidGraph(EquiMFError, ValueError):
    pass


class BadConfig(EquiMFError, ValueError):
    """Invalid configuration value; ``key`` names the offending field when known."""

    def __init__(self, message, key=None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class NonFinite(EquiMFError, FloatingPointError):
    pass


class DegenerateTime(EquiMFError, ValueError):
    pass


class CorruptCheckpoint(EquiMFError):
    pass


class TooLarge(EquiMFError, ValueError):
    pass


class UnknownState(EquiMFError, KeyError):
    pass


class Unsatisfiable(EquiMFError, ValueError):
    def __init__(self, n, message=None):
        self.n = n
        super().__init__(message or f"no stable connected graph exists with n={n}")

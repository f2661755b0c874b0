"""Exception hierarchy shared by every gmclab module."""


class GmcLabError(Exception):
    """Base class for all errors raised by gmclab."""


class DomainError(GmcLabError, ValueError):
    """An argument lies outside the mathematical domain of a function."""


class RangeError(GmcLabError, ValueError):
    """Evaluation requested outside a tabulated range."""


class ValidationError(GmcLabError, ValueError):
    """An object or input fails its declared invariants."""


class InconclusiveError(GmcLabError):
    """A classification cannot be decided from the available information."""


class NumericError(GmcLabError, ArithmeticError):
    """A numerical routine failed (quadrature, factorization, root finding)."""


class ResourceError(GmcLabError):
    """A request exceeds a configured size cap or sampling budget."""


class UsageError(GmcLabError, ValueError):
    """An API was called with inconsistent arguments."""


class ConfigError(GmcLabError, ValueError):
    """A run configuration is invalid.

    ``problems`` holds ``(path, message)`` pairs, one per violation.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        lines = [f"{path or '<root>'}: {msg}" for path, msg in self.problems]
        super().__init__("invalid configuration:\n  " + "\n  ".join(lines))

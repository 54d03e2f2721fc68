"""Exception types raised across the package."""


class PSTError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(PSTError, ValueError):
    pass


class ContractError(PSTError, ValueError):
    """A documented precondition or invariant was violated by the caller."""


class NumericalError(PSTError, ArithmeticError):
    """A NaN or Inf appeared in a computed tensor."""


class ConfigError(PSTError, ValueError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("invalid configuration: " + "; ".join(self.problems))


class CapacityError(PSTError, RuntimeError):
    """Not enough free units (or classifier rows) left to continue."""


class ParseError(PSTError, ValueError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)

"""Exception hierarchy shared by the solvers and the CLI."""


class DelaySMPError(Exception):
    """Base class for all library errors."""


class ConfigurationError(DelaySMPError):
    """Invalid numerical configuration (e.g. off-grid atom in strict mode)."""


class MissingInitialPathError(DelaySMPError):
    pass


class MissingTerminalPathError(DelaySMPError):
    pass


class BoundaryOverlapError(DelaySMPError):
    pass


class AdaptednessError(DelaySMPError):
    pass


class DomainError(DelaySMPError, ValueError):
    """Input outside the mathematical domain of an operation."""


class StructureError(DelaySMPError):
    """Equation does not have the structure an operation requires."""


class NonConvergenceError(DelaySMPError):
    """An iteration exhausted its budget before reaching tolerance.

    The successive differences are kept on ``history`` so callers can
    inspect how far the iteration got.
    """

    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)

class DomainError(ValueError):
    """Input violates an operation's precondition."""


class NumericError(ArithmeticError):
    """A non-finite value appeared during computation."""


class CorruptArtifactError(IOError):
    """A checkpoint or data file could not be parsed."""

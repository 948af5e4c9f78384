"""Exception hierarchy for the rslds package.

Library code raises these instead of bare built-ins so callers (the CLI in
particular) can tell bad input apart from numerical trouble.
"""


class RsldsError(Exception):
    """Base class for every error raised by rslds."""
    pass


class ValidationError(RsldsError, ValueError):
    """Raised when inputs have the wrong shape, range or family.

    Used to distinguish caller mistakes from runtime failures so the CLI can
    exit with the validation status code.
    """
    pass


class NumericalError(RsldsError, ArithmeticError):
    """Raised when a factorisation or moment computation breaks down."""
    pass


class MessagePassingError(NumericalError):
    """Raised when a chain message becomes indefinite or degenerate.

    Attributes:
        time_index: The (0-based) time step at which the recursion failed
    """

    def __init__(self, message: str, time_index: int):
        super().__init__(f"{message} (t={time_index})")
        self.time_index = time_index


class ArtifactError(RsldsError, OSError):
    """Raised when reading or writing a run artifact fails.

    The message always names the offending file.
    """
    pass

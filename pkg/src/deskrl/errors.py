"""Exception hierarchy shared across the package."""


class DeskRLError(Exception):
    """Base class for all package errors."""


class InvalidToken(DeskRLError, ValueError):
    pass


class ShapeMismatch(DeskRLError, ValueError):
    pass


class EmptyBatch(DeskRLError, ValueError):
    pass


class DegenerateGroup(DeskRLError, ValueError):
    """Raised when a reward group has zero variance and cannot be standardized."""


class NonFiniteGradient(DeskRLError, FloatingPointError):
    pass


class VerifierError(DeskRLError, RuntimeError):
    pass


class InvalidDifficulty(DeskRLError, ValueError):
    pass


class InsufficientInstances(DeskRLError, ValueError):
    """A family cannot supply the requested number of distinct prompts."""


class InvalidK(DeskRLError, ValueError):
    pass


class EmptyMatrix(DeskRLError, ValueError):
    pass


class InvalidMoments(DeskRLError, ValueError):
    pass


class CheckpointError(DeskRLError, ValueError):
    """Checkpoint could not be decoded. ``field`` names the header field that failed."""

    def __init__(self, field, message):
        super().__init__(f"checkpoint field '{field}': {message}")
        self.field = field


class ConfigError(DeskRLError, ValueError):
    """Invalid run configuration. ``field`` is the dotted path of the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field

"""Exception taxonomy shared across the engine."""


class RefgameError(Exception):
    """Base class for all engine errors."""


class ConfigurationError(RefgameError):
    """Dimension mismatches, missing checkpoints, inconsistent settings."""


class InputError(RefgameError):
    """Caller-supplied data violates an operation's preconditions."""


class NumericalDomainError(RefgameError):
    """A numeric operation was asked to leave its valid domain."""


class TrainingError(RefgameError):
    """Optimization diverged; carries diagnostics in the message."""


class ProtocolError(RefgameError):
    """Out-of-turn or malformed move in a game session."""


class InternalError(RefgameError):
    """Invariant breach that indicates a bug, not bad input."""


class StorageError(RefgameError):
    """Persistence failed; the operation may be retried."""

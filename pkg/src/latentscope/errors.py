"""Shared exception types."""


class LatentScopeError(Exception):
    """Base class for all library errors."""


class ShapeError(LatentScopeError):
    """An operation received tensors whose shapes violate its contract."""


class NonFiniteError(LatentScopeError):
    """A computation produced or received NaN/inf values."""


class ArtifactError(LatentScopeError):
    """A persisted artifact is missing, corrupt, or incompatible."""


class ConfigError(LatentScopeError):
    """Invalid configuration value or malformed config document."""


class DataError(LatentScopeError):
    """Input data violates an operation's contract (empty, degenerate, unlabeled)."""

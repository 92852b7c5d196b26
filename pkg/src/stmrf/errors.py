"""Exception types used across the engine.

Everything user-visible derives from EngineError so callers can catch one
base class at the CLI boundary and map failures to exit codes.
"""


class EngineError(Exception):
    """Base class for all engine failures."""


class ValidationError(EngineError, ValueError):
    """A value object or argument violates its contract."""


class DimensionError(ValidationError):
    """Array shape or frame geometry mismatch."""


class SequenceTooShortError(ValidationError):
    """A video needs at least two frames to build a temporal graph."""


class ConfigurationError(EngineError, ValueError):
    """Bad or missing configuration, dataset inputs, or lookup keys."""


class SizeError(EngineError, ValueError):
    """An exhaustive computation was asked to exceed its hard size bound."""


class SceneSpecError(ConfigurationError):
    """A synthetic scene description is malformed or out of bounds."""


class RefinementError(EngineError, RuntimeError):
    """A mask refinement backend failed (timeout, crash, bad output)."""


class ProtocolError(RefinementError):
    """Malformed traffic on the external refiner wire protocol."""

"""Exception hierarchy shared across the package."""


class TicketForgeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(TicketForgeError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class TapeReuseError(TicketForgeError, RuntimeError):
    """A gradient tape was asked to run backward a second time."""


class ConfigError(TicketForgeError, ValueError):
    """A configuration value violates its documented range or schema."""


class MaskError(TicketForgeError, ValueError):
    """A pruning mask does not line up with the parameters it targets."""


class TrainingError(TicketForgeError, RuntimeError):
    """Training produced a non-finite loss or gradient."""


class DataError(TicketForgeError, ValueError):
    """A batch is missing annotations required by the requested objective."""


class AdversarialError(TicketForgeError, RuntimeError):
    """The inner maximization produced a non-finite gradient."""


class CheckpointLookupError(TicketForgeError, KeyError):
    """No snapshot was recorded at the requested step."""

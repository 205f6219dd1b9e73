"""Exception hierarchy shared across the toolkit."""


class ClmarkError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(ClmarkError, ValueError):
    """An argument violates an operation's preconditions."""


class CapacityError(ClmarkError):
    """A dataset cannot supply the number of samples an operation needs."""

    def __init__(self, required: int, available: int, what: str = "samples"):
        self.required = required
        self.available = available
        super().__init__(f"need {required} {what}, only {available} available")


class ImageIOError(ClmarkError, IOError):
    """An image file could not be read or written."""


class UnsupportedModeError(ClmarkError):
    """The requested mode is not supported for the given inputs."""


class TransportError(ClmarkError):
    """A suspect-model query failed at the transport layer."""


class ProtocolError(ClmarkError):
    """A suspect-model response violated the wire protocol."""


class CapabilityError(ClmarkError):
    """The suspect model does not support the requested output level."""

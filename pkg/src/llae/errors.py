"""Exception types shared across the package."""


class ZeroEvidenceError(ValueError):
    """Raised when conditioning on evidence that has probability zero."""


class RejectedOperationError(Exception):
    """A structure operation (split/clone) cannot be applied as requested."""


class CircuitFormatError(ValueError):
    """Malformed vtree or circuit text file."""


class IdxFormatError(ValueError):
    """Malformed IDX file; carries the byte offset of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DecodeError(ValueError):
    """A bit pattern does not decode to a valid category."""


class TrainingDivergedError(RuntimeError):
    """Autoencoder training produced a non-finite or exploding loss."""

"""Exception hierarchy shared by every module of the package."""


class DQSegError(Exception):
    """Base class for all package errors."""


class ValidationError(DQSegError, ValueError):
    """Input data or configuration violates a documented invariant."""


class ContractError(DQSegError, ValueError):
    """A function was called with arguments that break its preconditions."""


class FormatError(DQSegError):
    """A binary file could not be parsed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(FormatError):
    pass


class CapacityError(DQSegError):
    """Scene synthesis could not place all requested objects."""


class EmptySceneError(DQSegError):
    """No point of the cloud lies inside the voxel grid."""


class NumericError(DQSegError, ArithmeticError):
    """A non-finite value appeared in a forward pass or a loss."""

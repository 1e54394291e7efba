"""Exception types raised across the package."""


class InvalidInputError(ValueError):
    """Input data violates a documented precondition."""


class InvalidParameterError(ValueError):
    """A parameter value is degenerate (e.g. a zero-norm quaternion)."""


class ContractError(RuntimeError):
    """A backward pass was handed a context that does not match its forward call."""


class CheckpointError(IOError):
    """A checkpoint file is malformed; the message names the offending field."""


class DatasetError(IOError):
    """A dataset directory is unreadable or incomplete; the message names the file."""

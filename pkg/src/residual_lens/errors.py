"""Exception hierarchy.

The CLI maps these onto exit codes: validation problems (bad checkpoint,
bad dataset) exit with 2, anything raised mid-computation with 3.
"""


class ResidualLensError(Exception):
    """Base class for every error raised by this package."""


class ContractError(ResidualLensError, ValueError):
    """A caller broke a precondition (shape mismatch, bad argument)."""


class DegenerateInputError(ContractError):
    """The input is valid in form but the quantity is undefined for it."""


class CheckpointError(ResidualLensError):
    """A checkpoint directory could not be read or failed validation."""

    def __init__(self, message: str, tensor: str | None = None):
        super().__init__(message)
        self.tensor = tensor


class MissingTensorError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class MalformedHeaderError(CheckpointError):
    pass


class ContextOverflowError(ContractError):
    """More positions were requested than the model's context window holds."""


class DatasetError(ResidualLensError):
    pass


class UndefinedAUCError(ResidualLensError):
    """ROC analysis needs at least one score in each class."""

"""Exception hierarchy shared by every module."""


class XaiKitError(Exception):
    """Base class for all library errors."""


class ContractError(XaiKitError, ValueError):
    """A precondition on arguments was violated."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible."""


class EvaluationError(XaiKitError):
    """A function produced a non-finite value where a finite one was required."""


class BuildError(ContractError):
    """A model configuration cannot be realised."""


class IngestError(XaiKitError):
    """An image or dataset could not be read."""


class SolverError(XaiKitError):
    """A linear system could not be solved."""


class CheckpointError(XaiKitError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass

class MoCEError(Exception):
    """Base class for every error raised by the moce package."""


class ShapeError(MoCEError, ValueError):
    """Operand shapes do not agree."""


class ContractError(MoCEError, ValueError):
    """A precondition of an operation was violated."""


class TapeStateError(MoCEError, RuntimeError):
    """A computation tape was used after it had been consumed."""


class NumericError(MoCEError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class DataFormatError(MoCEError, ValueError):
    """An input file does not follow its documented format."""


class ConfigurationError(MoCEError, ValueError):
    """Configuration values are inconsistent with each other or with saved artifacts."""


class SetupError(MoCEError, RuntimeError):
    """The pipeline cannot be assembled from the given data."""

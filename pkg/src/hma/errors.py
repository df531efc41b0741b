"""Exception hierarchy shared across the package."""


class HmaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(HmaError, ValueError):
    """Tensor shapes or dimensions are inconsistent with an operation's contract."""


class ConfigError(HmaError, ValueError):
    """A configuration violates its invariants or contains unknown fields."""


class ImageError(HmaError, ValueError):
    """An image file is unreadable, unsupported, or malformed."""


class CheckpointError(HmaError, ValueError):
    """A checkpoint file is malformed or inconsistent."""


class TrainingDivergedError(HmaError, ArithmeticError):
    """Training produced a non-finite loss."""


class UsageError(HmaError, ValueError):
    """Command line was invoked incorrectly."""

"""Exception hierarchy shared by every dtml module."""


class DTMLError(Exception):
    """Base class for all package errors."""


class DegenerateMask(DTMLError, ValueError):
    """Mask is all-foreground or all-background, so it has no boundary."""


class DegenerateMap(DTMLError, ValueError):
    """Signed distance map is identically zero and cannot be normalized."""


class ShapeMismatch(DTMLError, ValueError):
    pass


class NormalizationMismatch(DTMLError, ValueError):
    pass


class InvalidDescriptor(DTMLError, ValueError):
    pass


class InvalidShape(DTMLError, ValueError):
    pass


class EmptyPartition(DTMLError, ValueError):
    pass


class CropTooLarge(DTMLError, ValueError):
    pass


class FatalDivergence(DTMLError, RuntimeError):
    """Raised when a loss or parameter becomes non-finite during training."""


class MissingCheckpoint(DTMLError, FileNotFoundError):
    pass


class InvalidConfig(DTMLError, ValueError):
    pass


class IOFailure(DTMLError, OSError):
    pass

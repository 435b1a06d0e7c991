"""Exception types shared across the package."""


class CrateError(Exception):
    """Base class for all package errors."""


class DimensionError(CrateError, ValueError):
    pass


class NotPositiveDefinite(CrateError, ValueError):
    pass


class FormatError(CrateError, ValueError):
    """Malformed checkpoint or dataset file."""


class MaskError(CrateError, IndexError):
    pass


class InsufficientTrials(CrateError, ValueError):
    pass


class DegenerateLabels(CrateError, ValueError):
    pass

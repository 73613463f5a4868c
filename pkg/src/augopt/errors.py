"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class AugoptError(Exception):
    exit_code = 2


class DataError(AugoptError):
    """Bad or missing input data (exit code 2)."""

    exit_code = 2


class NumericalError(AugoptError):
    """Non-finite values or an optimization that cannot proceed (exit code 3)."""

    exit_code = 3


class InvalidTransformError(NumericalError):
    pass


class EmptyMaskError(DataError):
    pass


class InsufficientTargetsError(DataError):
    pass


class DegenerateAnatomyError(NumericalError):
    pass


class FormatError(DataError):
    pass

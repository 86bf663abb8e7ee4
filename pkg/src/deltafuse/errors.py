"""Exception types shared across the package.

Every error raised on a user-facing path derives from DeltafuseError so
callers (and the command line front end) can distinguish bad input from
genuine bugs with a single except clause.
"""


class DeltafuseError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(DeltafuseError):
    """Two tensors that must share a shape do not."""


class MissingParameter(DeltafuseError):
    """A parameter name expected to be present is absent."""


class UnknownParameter(DeltafuseError):
    """A parameter name is present that the operation does not allow."""


class EmptyParamSet(DeltafuseError):
    """An operation requires at least one parameter."""


class NonFiniteResult(DeltafuseError):
    """A computation produced NaN or infinity."""


class FormatError(DeltafuseError):
    """A serialized checkpoint or data file is malformed.

    Carries the byte offset of the first inconsistency when one can be
    determined, else the offending field name.
    """

    def __init__(self, message, *, offset=None, field=None):
        detail = message
        if offset is not None:
            detail = f"{message} (byte offset {offset})"
        elif field is not None:
            detail = f"{message} (field {field!r})"
        super().__init__(detail)
        self.offset = offset
        self.field = field


class InvalidProbability(DeltafuseError):
    """A drop probability lies outside [0, 1)."""


class InvalidThreshold(DeltafuseError):
    """A magnitude threshold is not a positive finite real."""


class InvalidDensity(DeltafuseError):
    """A keep fraction lies outside (0, 1]."""


class ZeroWeightSum(DeltafuseError):
    """Merge weights sum to zero where a normalized sum is required."""


class UnsupportedMethod(DeltafuseError):
    """A merge or training method name is not recognized."""


class EmptyBatch(DeltafuseError):
    """A loss or training routine received no examples."""


class EmptySuite(DeltafuseError):
    """An evaluation was requested with no evaluation suites."""


class DivergenceDetected(DeltafuseError):
    """Training produced a non-finite loss or a sustained blow-up."""

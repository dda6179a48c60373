"""Exception hierarchy.

Everything raised for bad input data derives from :class:`DataError`, which
the CLI maps to exit code 2.
"""


class DataError(ValueError):
    """Input data violates an operation's contract."""


class FormatError(DataError):
    """A file does not conform to its declared format."""


class MalformedHeaderError(FormatError):
    pass


class DimensionMismatchError(FormatError):
    pass


class DuplicateIdError(DataError):
    pass


class NonFiniteValueError(DataError):
    pass


class ZeroNormError(DataError):
    pass


class UnknownIdError(DataError):
    pass


class AlignmentError(DataError):
    """Score sets or feature tables do not line up trial by trial."""


class SingleClassError(DataError):
    """Metrics or fitting need both target and nontarget trials."""


class FlatCurveError(DataError):
    pass

"""Exception hierarchy shared by all modules."""


class BSSError(Exception):
    """Base class for every error raised by mvbss."""


class SingularMatrix(BSSError, ValueError):
    pass


class NoPositiveRoot(BSSError, ValueError):
    pass


class NumericalBreakdown(BSSError, FloatingPointError):
    pass


class DegenerateDenominator(BSSError, ValueError):
    pass


class RankDeficientData(BSSError, ValueError):
    pass


class DimensionMismatch(BSSError, ValueError):
    pass


class InvalidFraming(BSSError, ValueError):
    pass


class UnsupportedFormat(BSSError, ValueError):
    pass


class IoFailure(BSSError, OSError):
    pass


class ZeroReference(BSSError, ValueError):
    pass


class CountMismatch(BSSError, ValueError):
    pass


class ZeroColumn(BSSError, ValueError):
    pass


class RankDeficientH(BSSError, ValueError):
    pass


class IllConditionedMixing(BSSError, ValueError):
    pass


class InvalidGeometry(BSSError, ValueError):
    pass

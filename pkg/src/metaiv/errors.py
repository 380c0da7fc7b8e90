"""Exception hierarchy.

Two families matter to callers: ``ValidationError`` for malformed input
(bad shapes, bad parameters, unreadable files) and ``EstimationError`` for
estimates that are statistically or numerically impossible on otherwise
valid input. The CLI maps them to exit codes 2 and 3 respectively.
"""


class MetaIVError(Exception):
    """Base class for all metaiv errors.

    Structured context (offending group id, file, line, counts, ...) is kept
    in ``self.context`` so callers can report precise diagnostics.
    """

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context

    def __str__(self) -> str:
        base = super().__str__()
        if self.context:
            detail = ", ".join(f"{k}={v}" for k, v in sorted(self.context.items()))
            return f"{base} ({detail})"
        return base


class ValidationError(MetaIVError):
    """Input was malformed before any estimation started."""


class EstimationError(MetaIVError):
    """Estimation cannot proceed or produce a usable result."""


# Validation family.

class BadParameters(ValidationError):
    pass


class BadSpec(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class GroupTooSmall(ValidationError):
    pass


class FileFormatError(ValidationError):
    pass


class FileDimensionMismatch(FileFormatError):
    pass


# Estimation family.

class SingularDesign(EstimationError):
    pass


class TooFewGroups(EstimationError):
    pass


class TooFewRows(EstimationError):
    pass


class InsufficientRetainedGroups(EstimationError):
    pass


class SingularNullCovariance(EstimationError):
    pass


class TooFewControlGroups(EstimationError):
    pass


class DegenerateCovariance(EstimationError):
    pass


class ZeroDenominator(EstimationError):
    pass


class NoEstimableThreshold(EstimationError):
    pass

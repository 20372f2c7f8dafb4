"""Exception hierarchy.

Everything raised deliberately by the library derives from ``EventStudyError``
so callers (and the CLI) can separate modelling failures from programming
errors.  ``InputError`` subclasses are problems with the data handed in;
``EstimationError`` subclasses are problems that arise while estimating.
"""


class EventStudyError(Exception):
    """Base class for library errors."""


class InputError(EventStudyError):
    """The input data violates a structural requirement."""


class MissingCell(InputError):
    def __init__(self, unit, time):
        self.unit = unit
        self.time = time
        super().__init__(f"missing outcome for unit={unit!r}, time={time!r} (panel must be balanced)")


class DuplicateCell(InputError):
    def __init__(self, unit, time):
        self.unit = unit
        self.time = time
        super().__init__(f"duplicate rows for unit={unit!r}, time={time!r}")


class EventTimeOutOfRange(InputError):
    pass


class NonNumericOutcome(InputError):
    pass


class InconsistentEventTime(InputError):
    pass


class EstimationError(EventStudyError):
    """Raised when an estimator cannot be computed on the given data."""


class RankDeficientDesign(EstimationError):
    def __init__(self, message, dependent=()):
        self.dependent = tuple(dependent)
        if self.dependent:
            message = f"{message}; dependent columns: {', '.join(map(str, self.dependent))}"
        super().__init__(message)


class NoTreatmentVariation(EstimationError):
    pass


class SingularBread(EstimationError):
    pass


class SampleMismatch(EstimationError):
    pass


class SingularRestrictionCovariance(EstimationError):
    pass


class NoLeadCoefficients(EstimationError):
    pass


class NoEstimableCells(EstimationError):
    pass


class EmptyControlSet(EstimationError):
    pass


class EmptyCohort(EstimationError):
    pass


class InvalidBasePeriod(EstimationError):
    pass


class NotYetTreatedViolated(EstimationError):
    pass


class OverlapViolation(EstimationError):
    pass


class FoldDegenerate(EstimationError):
    pass


class EmptyCellWarning(UserWarning):
    """Requested design cells with no observations were pruned."""


class ExcludedLagWarning(UserWarning):
    """A post-treatment relative time was excluded from a dynamic design."""


class OverlapWarning(UserWarning):
    """Estimated propensities were clipped at the overlap floor."""


class SpanningWarning(UserWarning):
    """The saturated design does not span the dynamic regressors, so the
    weight reconstruction is not an exact identity."""

"""Exception types raised across the package."""


class InkmarkError(Exception):
    """Base class for every error raised by inkmark."""


class EmptyCorpus(InkmarkError, ValueError):
    pass


class InsufficientDocuments(InkmarkError, ValueError):
    pass


class EmptySequence(InkmarkError, ValueError):
    pass


class LengthMismatch(InkmarkError, ValueError):
    pass


class VocabularyMismatch(InkmarkError):
    pass


class EndpointUnavailable(InkmarkError):
    pass


class MalformedResponse(InkmarkError):
    pass


class SchemeMismatch(InkmarkError, ValueError):
    pass


class SequenceTooShort(InkmarkError, ValueError):
    pass


class UndefinedStatistic(InkmarkError, ArithmeticError):
    pass


class EmptySample(InkmarkError, ValueError):
    pass


class UnachievableTarget(InkmarkError):
    pass


class NoFeasibleGamma(InkmarkError):
    pass


class CategoryMismatch(InkmarkError, ValueError):
    pass


class MixedCategories(InkmarkError, ValueError):
    pass


class DegenerateBaseline(InkmarkError, ZeroDivisionError):
    pass


class InvalidCount(InkmarkError, ValueError):
    pass


class NotCLS(InkmarkError, ValueError):
    pass


class MultiTokenLabel(InkmarkError, ValueError):
    pass


class TooManyLabels(InkmarkError, ValueError):
    pass


class IncompleteEnumeration(InkmarkError, ValueError):
    pass


class KTooLarge(InkmarkError, ValueError):
    pass


class EmptyRunDir(InkmarkError):
    pass


class StageError(InkmarkError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause

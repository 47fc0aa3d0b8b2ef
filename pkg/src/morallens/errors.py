"""Exception types raised across the pipeline."""

from __future__ import annotations


class MoralLensError(Exception):
    """Base class for all library errors."""


# ingestion

class MalformedRecord(MoralLensError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class UnknownModality(MoralLensError, ValueError):
    pass


class SchemaMismatch(MoralLensError):
    pass


class OutOfRangeResponse(MoralLensError):
    def __init__(self, row: int, field: str, value: object = None):
        super().__init__(f"row {row}: field {field!r} out of range ({value!r})")
        self.row = row
        self.field = field
        self.value = value


class EmptyCohort(MoralLensError):
    pass


class MissingReferenceLabel(MoralLensError):
    pass


# psychometrics

class WrongItemCount(MoralLensError, ValueError):
    pass


class OutOfRangeItem(MoralLensError, ValueError):
    pass


class DegenerateDistribution(MoralLensError):
    pass


class MissingSurvey(MoralLensError):
    pass


# features

class EmptyModality(MoralLensError):
    pass


class UserSetMismatch(MoralLensError):
    pass


class EmptySelection(MoralLensError):
    pass


# forest

class EmptyNode(MoralLensError, ValueError):
    pass


class VocabularyMismatch(MoralLensError):
    pass


class SingleClassTraining(UserWarning):
    """Warning: training labels contained a single class; a constant model was returned."""


# evaluation

class SingleClassEvaluation(MoralLensError):
    pass


class NoEvaluableClass(MoralLensError):
    pass


class InsufficientSamples(MoralLensError):
    pass


class StratificationImpossible(MoralLensError):
    pass


# experiments / synth

class UnfillableCap(MoralLensError):
    def __init__(self, bin_index: int, detail: str = ""):
        super().__init__(f"training bin {bin_index} cannot fill class caps {detail}".rstrip())
        self.bin_index = bin_index


class NoActiveUsers(MoralLensError):
    pass


class SpecInvalid(MoralLensError, ValueError):
    pass

"""Exception hierarchy shared by all accelmix modules.

The CLI maps the three families (validation, data, numerical) onto
distinct exit codes.
"""


class AccelmixError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ValidationError(AccelmixError):
    exit_code = 2


class DataError(AccelmixError):
    exit_code = 3


class NumericalError(AccelmixError):
    exit_code = 4


# ingest
class NoData(DataError):
    pass


class CorruptFile(DataError):
    pass


class EmptySelection(DataError):
    pass


# forcemap
class InsufficientData(DataError):
    pass


class DegenerateSample(NumericalError):
    pass


class DomainError(NumericalError):
    pass


# matvar
class NotPositiveDefinite(NumericalError):
    pass


# mbi
class InitFailed(NumericalError):
    pass


class NumericalFailure(NumericalError):
    def __init__(self, message, index=None, iteration=None):
        super().__init__(message)
        self.index = index
        self.iteration = iteration


class EmptyComponent(NumericalError):
    def __init__(self, message, component=None, iteration=None):
        super().__init__(message)
        self.component = component
        self.iteration = iteration


class SearchFailed(NumericalError):
    pass


# survival
class EmptyGroup(DataError):
    pass


class DegenerateContrast(DataError):
    pass


class NonIdentifiable(NumericalError):
    pass


class CollinearDesign(NumericalError):
    pass


class RecordSkipped(DataError):
    pass


class IoError(AccelmixError):
    exit_code = 5

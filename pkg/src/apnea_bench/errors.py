"""Exception hierarchy.

Each family maps onto one CLI exit code: configuration problems exit with 2,
bad input data with 3 and numeric failures with 4.
"""


class ApneaBenchError(Exception):
    exit_code = 1


class ConfigError(ApneaBenchError):
    exit_code = 2


class DataError(ApneaBenchError):
    exit_code = 3


class NumericError(ApneaBenchError):
    exit_code = 4


# record_io
class MalformedHeader(DataError):
    pass


class TruncatedPayload(DataError):
    pass


class NonPositiveSampleRate(DataError):
    pass


class EventOutOfBounds(DataError):
    pass


class InvalidEventClass(DataError):
    pass


class OverlappingEvents(DataError):
    pass


# preprocess
class RateTooLow(DataError):
    pass


class DegenerateSignal(DataError):
    pass


class RecordTooShort(DataError):
    pass


# synthgen
class ConfigInfeasible(ConfigError):
    pass


# neuralnet
class ShapeMismatch(ValueError, DataError):
    pass


# trainer
class DegenerateValidationSet(NumericError):
    pass


class CascadeStalled(NumericError):
    pass


# evaluate
class SingleClassInput(NumericError):
    pass


class ZeroSleepHours(DataError):
    pass


class DegenerateDesign(NumericError):
    pass


class MissingReference(DataError):
    pass


class NyquistWarning(UserWarning):
    """A filter was skipped because its frequency is at or above Nyquist."""

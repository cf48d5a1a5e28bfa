"""
Exception hierarchy for the HCAN toolkit.

Every error carries the process exit code the CLI reports for it:
0 success, 1 usage/config, 2 data, 3 numeric/verification failure.
"""


class HcanError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(HcanError):
    exit_code = 1


class UsageError(HcanError):
    exit_code = 1


class DataError(HcanError):
    exit_code = 2


class CorpusParseError(DataError):
    pass


class CorpusSchemaError(DataError):
    pass


class CorpusConsistencyError(DataError):
    pass


class TrainingDataError(DataError):
    pass


class CheckpointError(DataError):
    pass


class CompatibilityError(DataError):
    pass


class NumericError(HcanError):
    exit_code = 3


class DimensionError(NumericError):
    pass


class DomainError(NumericError):
    pass


class NonFiniteLossError(NumericError):
    pass


class VerificationError(NumericError):
    pass

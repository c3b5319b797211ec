"""Exception hierarchy.

Every error carries a short machine-readable ``code`` and the process exit
status the CLI should use when it escapes to the top level.
"""

from __future__ import annotations

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class DFMError(Exception):
    code = "Error"
    exit_code = EXIT_DATA


class UsageError(DFMError):
    code = "UsageError"
    exit_code = EXIT_USAGE


class DataError(DFMError):
    code = "DataError"
    exit_code = EXIT_DATA


class FormatError(DataError):
    code = "FormatError"


class InvalidValue(DataError):
    code = "InvalidValue"


class DimensionMismatch(DataError):
    code = "DimensionMismatch"


class LabelsRequired(DataError):
    code = "LabelsRequired"


class InsufficientSamples(DataError):
    code = "InsufficientSamples"


class MissingSection(DataError):
    code = "MissingSection"


class LeakageError(DataError):
    code = "Leakage"


class NumericalError(DFMError):
    code = "NumericalError"
    exit_code = EXIT_NUMERICAL


class DegenerateGram(NumericalError):
    code = "DegenerateGram"


class SingularCovariance(NumericalError):
    code = "SingularCovariance"


class FitFailed(NumericalError):
    code = "FitFailed"

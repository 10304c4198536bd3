"""Exception types shared across the package."""


class CoverLvmError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CoverLvmError, ValueError):
    """Inconsistent dimensions, invalid model options, or bad arguments."""


class DomainError(CoverLvmError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class ParameterError(CoverLvmError, ValueError):
    """A parameter violates its constraints (ordering, positivity, finiteness)."""


class DataValidationError(CoverLvmError, ValueError):
    """Data failed pre-fit validation; message lists the offending species."""


class UnsupportedFamilyError(CoverLvmError, ValueError):
    """The requested operation is not defined for this response family."""


class CalibrationError(CoverLvmError, RuntimeError):
    """Boundary-mass calibration could not bracket its target."""


class FitFailureError(CoverLvmError, RuntimeError):
    """Every optimization restart diverged."""

    def __init__(self, message, diagnostics=()):
        super().__init__(message)
        self.diagnostics = tuple(diagnostics)


class CsvFormatError(CoverLvmError, ValueError):
    """A delimited input file is malformed; message names row and column."""


class ModelFormatError(CoverLvmError, ValueError):
    """A serialized model file is unreadable or has an incompatible version."""

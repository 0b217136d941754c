"""Exception hierarchy; each class carries the CLI exit code for its failure class."""


class SpincantError(Exception):
    exit_code = 1


class ValidationError(SpincantError, ValueError):
    exit_code = 2

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class TruncationError(SpincantError):
    exit_code = 3

    def __init__(self, message, required=None):
        self.required = required
        super().__init__(message)


class IntegrationError(SpincantError):
    exit_code = 4


class StepLimitError(IntegrationError):
    exit_code = 5


class DriftError(IntegrationError):
    """Norm or trace moved further than the integrator tolerance allows."""

    exit_code = 6


class PositivityError(IntegrationError):
    exit_code = 7


class AnalysisError(SpincantError):
    exit_code = 8


class BoundaryMassError(AnalysisError):
    exit_code = 9


class OutputError(SpincantError):
    """Output directory not writable or a dump could not be read back."""

    exit_code = 10


class ResourceError(SpincantError):
    """The requested run would not fit the memory budget."""

    exit_code = 11

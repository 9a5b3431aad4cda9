"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: validation problems exit 1, numerical
failures exit 2, external-predictor failures exit 3.
"""


class SyndiError(Exception):
    """Base class for all package errors."""


class ValidationError(SyndiError):
    """Bad inputs: schema mismatches, malformed specs, precondition failures."""


class ParseError(ValidationError):
    """Malformed cell in an input file; carries row/column context."""

    def __init__(self, message, row=None, column=None):
        if row is not None:
            message = f"{message} (row {row}, column {column!r})"
        super().__init__(message)
        self.row = row
        self.column = column


class DomainError(ValidationError):
    """Value outside the range its column role permits."""


class NumericalError(SyndiError):
    """Numerical failure inside a fitting or calibration routine."""


class SingularDesignError(NumericalError):
    """Design matrix is rank deficient."""


class IncompleteDataError(NumericalError):
    """Masked cells encountered where complete data is required."""


class CalibrationError(NumericalError):
    """Bias-correction solve failed (bracket failure, degenerate prevalence)."""


class BootstrapError(NumericalError):
    """Too many bootstrap replicates failed to converge."""


class PredictorError(SyndiError):
    """External black-box predictor invocation failed."""


class PredictorProtocolError(PredictorError):
    """Predictor returned output violating the probability protocol."""

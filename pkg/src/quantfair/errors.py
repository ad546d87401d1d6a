"""Exception types raised across the package.

Every error carries a short machine-readable ``code`` so that callers (the
protocol runner, the CLI) can record or map failures without parsing text.
"""


class QuantFairError(Exception):
    """Base class for all package errors."""

    code = "error"

    def __init__(self, message="", code=None):
        super().__init__(message)
        if code is not None:
            self.code = code


class SampleError(QuantFairError):
    """A labeled sample violates its structural invariants."""

    code = "invalid-sample"


class IngestionError(QuantFairError):
    """A dataset could not be loaded or preprocessed."""

    code = "ingestion"


class SchemaError(QuantFairError):
    code = "invalid-schema"


class DimensionMismatchError(QuantFairError):
    code = "dimension-mismatch"


class SingleClassError(QuantFairError):
    """Training data contains a single class for the selected label."""

    code = "single-class-input"


class FoldDegeneracyError(QuantFairError):
    code = "fold-degeneracy"


class EmptySampleError(QuantFairError):
    code = "empty-sample"


class MissingValidationError(QuantFairError):
    code = "missing-validation"


class NotApplicableError(QuantFairError):
    code = "not-applicable-method"


class BranchDegeneracyError(QuantFairError):
    code = "branch-degeneracy"


class EmptyGroupError(QuantFairError):
    code = "empty-group"


class CellTooSmallError(QuantFairError):
    code = "cell-too-small"


class ConfigError(QuantFairError):
    code = "config-invalid"

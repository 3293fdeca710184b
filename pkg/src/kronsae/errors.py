"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: contract violations exit with 2,
numeric failures with 3 and I/O failures with 4.
"""


class KronSaeError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ContractError(KronSaeError, ValueError):
    """A precondition on shapes, ranges or configuration was violated."""

    exit_code = 2


class NumericError(KronSaeError, ArithmeticError):
    """Base class for failures of a numerical routine."""

    exit_code = 3


class DecompositionError(NumericError):
    """Cholesky failed; ``pivot`` is the index of the offending diagonal entry."""

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class MetricError(NumericError):
    """A metric is undefined for its input (zero variance, empty record, ...)."""


class TrainingError(NumericError):
    """Loss or gradient became non-finite during optimisation."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class FormatError(KronSaeError, OSError):
    """A file on disk is malformed, truncated or of the wrong version."""

    exit_code = 4

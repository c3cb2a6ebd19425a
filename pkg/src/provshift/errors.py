"""Exception types shared across the package.

Data/infeasibility errors map to CLI exit code 2, divergence and
search failures to exit code 3.
"""


class ProvShiftError(Exception):
    """Base class for all package errors."""


class DataError(ProvShiftError):
    """Invalid or infeasible data (CLI exit code 2)."""


class EmptyDatasetError(DataError):
    pass


class UndefinedAlphaError(DataError):
    """A conditional P(Y=1|Z=z) is 0 or 1, so log alpha is undefined."""


class DatasetParseError(DataError):
    """Malformed annotated-dataset file; carries the offending line number."""

    def __init__(self, line_no, message):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class InfeasibleJointError(DataError):
    pass


class CellStarvedError(DataError):
    """A (y, z) cell with positive target probability has no examples."""

    def __init__(self, y, z):
        self.cell = (y, z)
        super().__init__(f"cell-starved: no examples available for cell (y={y}, z={z})")


class SubjectConflictError(DataError):
    pass


class ProvenanceStarvedError(DataError):
    pass


class InsufficientGroupError(DataError):
    pass


class NonFiniteInputError(DataError):
    pass


class MissingNoiseError(DataError):
    """Counterfactual regeneration requested without a stored noise record."""


class NotYInvariantError(DataError):
    """Discrete world violates the conditional independence X | Z required by the oracle."""


class RankDeficientError(DataError):
    """Line fit requested on degenerate abscissae."""


class DivergenceError(ProvShiftError):
    """Non-finite loss or gradient during training (CLI exit code 3)."""


class SearchFailedError(ProvShiftError):
    """Every trial of a random search diverged (CLI exit code 3)."""

    def __init__(self, records):
        self.records = records
        super().__init__("search-failed: all trials diverged")

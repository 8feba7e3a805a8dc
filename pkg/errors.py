"""
Exception hierarchy for the model-based metric toolkit
Every failure the library reports on purpose derives from MBMError
"""

from typing import Optional


class MBMError(Exception):
    """Base class for all toolkit errors"""


# ==================== INGESTION ====================

class SchemaError(MBMError, KeyError):
    """A mapped column or schema entry is missing"""

    def __init__(self, message: str, column: Optional[str] = None):
        super().__init__(message)
        self.column = column

    def __str__(self):
        return self.args[0]


class CSVParseError(MBMError, ValueError):
    """A cell could not be parsed (row is the 1-based data row, header not counted)"""

    def __init__(self, message: str, row: Optional[int] = None):
        super().__init__(message)
        self.row = row


class RecordValidationError(MBMError, ValueError):
    """A record violates a dataset invariant"""

    def __init__(self, message: str, row: Optional[int] = None):
        super().__init__(message)
        self.row = row


class SubpopKeyError(MBMError, KeyError):
    """Subpopulation key binds an unknown attribute or level"""

    def __str__(self):
        return self.args[0]


class LevelError(MBMError, ValueError):
    """A categorical level is not part of the schema"""


class DataError(MBMError, ValueError):
    """Numerical data is unusable (NaN in a cache, empty dataset, ...)"""


# ==================== MODEL FORMULAS ====================

class FormulaSyntaxError(MBMError, ValueError):
    """Formula text does not follow the grammar"""

    def __init__(self, message: str, position: int = 0):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class UnsupportedConstructError(FormulaSyntaxError):
    """Valid-looking construct the grammar deliberately rejects (nested |, ^3, ...)"""


class NameResolutionError(MBMError, KeyError):
    """Formula name is neither an attribute, a covariate nor Y"""

    def __str__(self):
        return self.args[0]


# ==================== ESTIMATION ====================

class InsufficientClassError(MBMError, ValueError):
    """An estimator needs at least one record of a class that is absent"""

    def __init__(self, message: str, missing_class: Optional[int] = None, key=None):
        super().__init__(message)
        self.missing_class = missing_class
        self.key = key


class UndefinedMetricError(MBMError, ValueError):
    """Metric has an empty denominator; reported as missing, never as 0"""

    def __init__(self, message: str, key=None):
        super().__init__(message)
        self.key = key


class ShapeError(MBMError, ValueError):
    """Parameter record does not conform to the design matrices"""


class StalenessError(MBMError, ValueError):
    """Posterior draws were fit to a different (spec, dataset) pair"""


class AlignmentError(MBMError, ValueError):
    """Estimate lists to be merged do not cover the same keys"""


# ==================== GENERATOR / CONFIG ====================

class PopulationSpecError(MBMError, ValueError):
    """Population specification is invalid (weights, covariance, probabilities)"""


class ConfigError(MBMError, ValueError):
    """Run configuration is invalid"""


def tag_with_key(exc: MBMError, key) -> MBMError:
    """Attach a subpopulation key to an estimator error and return it"""
    exc.key = key
    return exc

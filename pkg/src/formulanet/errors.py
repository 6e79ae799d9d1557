"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line frontend can map
failures onto its stable contract (2 usage/config, 3 data/model I/O,
4 divergence).
"""


class FormulaNetError(Exception):
    exit_code = 1


# -- usage / configuration (exit 2) -----------------------------------------

class ConfigError(FormulaNetError):
    exit_code = 2


class ConfigInvalid(ConfigError):
    pass


class ArchitectureOverride(ConfigError):
    """Raised when continue-training tries to change the architecture or loss."""


class FormulaError(ConfigError):
    pass


class MissingTilde(FormulaError):
    pass


class EmptyResponse(FormulaError):
    pass


class EmptyRhs(FormulaError):
    pass


class MinusWithoutDot(FormulaError):
    pass


class InvalidIdentifier(FormulaError):
    pass


class ResponseIsExcluded(FormulaError):
    pass


# -- data and model I/O (exit 3) ---------------------------------------------

class DataError(FormulaNetError):
    exit_code = 3


class CsvError(DataError):
    pass


class UnknownColumn(DataError):
    def __init__(self, column, message=None):
        self.column = column
        super().__init__(message or f"unknown column {column!r}")


class EmptyPredictorSet(DataError):
    pass


class MissingValues(DataError):
    def __init__(self, row, column):
        self.row = row
        self.column = column
        super().__init__(f"missing value in column {column!r} at row {row}")


class UnseenLevel(DataError):
    def __init__(self, column, level, row):
        self.column = column
        self.level = level
        self.row = row
        super().__init__(
            f"level {level!r} of column {column!r} (row {row}) was not seen at fit time"
        )


class ColumnTypeMismatch(DataError):
    pass


class InvalidTarget(DataError):
    pass


class ShapeMismatch(FormulaNetError):
    pass


class StaleCache(ShapeMismatch):
    pass


class NonFiniteLoss(FormulaNetError):
    pass


class NonFiniteGradient(FormulaNetError):
    pass


class UnknownFeature(DataError):
    pass


class DegenerateFeature(DataError):
    pass


class ModelHasNoData(DataError):
    """The model was saved without its training table."""


class BootstrapError(FormulaNetError):
    exit_code = 4


class TooFewReplicates(BootstrapError):
    pass


class ModelFileError(DataError):
    pass


class SerializationError(ModelFileError):
    pass


class ChecksumMismatch(ModelFileError):
    pass


class UnsupportedVersion(ModelFileError):
    pass


class InvariantViolation(ModelFileError):
    pass


# -- training outcome (exit 4) ----------------------------------------------

class Diverged(FormulaNetError):
    exit_code = 4

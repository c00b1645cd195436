class AggLearnError(Exception):
    """Base class for library errors."""


class SchemaError(AggLearnError):
    pass


class DataError(AggLearnError):
    """Malformed input data (bad label values, wrong shapes)."""


class EncodingError(AggLearnError):
    pass


class ReportStateError(AggLearnError):
    """An operation was applied to a report in the wrong state."""


class DivergenceError(AggLearnError):
    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"non-finite parameters at iteration {iteration}")

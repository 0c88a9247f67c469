"""Exception hierarchy shared by every module of the toolkit."""


class ReidMetricError(Exception):
    """Base class for all toolkit errors."""


class DegenerateNorm(ReidMetricError, ValueError):
    pass


class ShapeMismatch(ReidMetricError, ValueError):
    pass


class StaleCache(ReidMetricError, ValueError):
    pass


class LabelOutOfRange(ReidMetricError, ValueError):
    pass


class EpochOutOfRange(ReidMetricError, ValueError):
    pass


class ConfigError(ReidMetricError, ValueError):
    pass


class ConfigMismatch(ReidMetricError, ValueError):
    pass


class DataError(ReidMetricError):
    """Base for problems with dataset contents or files."""


class EmptyDataset(DataError, ValueError):
    pass


class InfeasibleBatch(DataError, ValueError):
    pass


class ParseError(DataError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class MissingPayload(DataError, FileNotFoundError):
    pass


class InsufficientSamples(DataError, ValueError):
    pass


class EmptyGallery(ReidMetricError, ValueError):
    pass


class NoRelevant(ReidMetricError, ValueError):
    """Raised by average_precision when a query has no relevant gallery item.

    Callers treat it as a signal to skip the query, not as a failure.
    """


class InsufficientIdentities(ReidMetricError, ValueError):
    pass


class DimMismatch(ReidMetricError, ValueError):
    pass


class NonFiniteLoss(ReidMetricError, FloatingPointError):
    pass

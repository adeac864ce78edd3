"""Exception hierarchy shared by every stage of the estimator."""


class GcfnError(Exception):
    """Base class; the CLI maps every subclass to a non-zero exit code."""


class ConfigError(GcfnError, ValueError):
    pass


class DomainError(GcfnError, ValueError):
    pass


class DataError(GcfnError, ValueError):
    pass


class ParseError(DataError):
    pass


class TrainingError(GcfnError, RuntimeError):
    pass


class EstimationError(GcfnError, RuntimeError):
    pass

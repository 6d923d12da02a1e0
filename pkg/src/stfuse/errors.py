"""Exception hierarchy shared by every stfuse module."""


class StfuseError(Exception):
    """Base class; the CLI maps any subclass to exit status 1."""


class FormatError(StfuseError):
    pass


class TruncationError(FormatError):
    pass


class ValidationError(StfuseError):
    pass


class StackError(ValidationError):
    pass


class DimensionError(ValidationError):
    pass


class ParameterError(StfuseError):
    pass


class LabelingError(ValidationError):
    pass


class EmptyDistributionError(StfuseError):
    pass


class EmptyEvaluationError(StfuseError):
    pass

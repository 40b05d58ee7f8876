"""
Exception hierarchy shared by every package of the project.
"""


class Sim2RealError(Exception):
    """Base class for all errors raised by this project."""


class ConfigError(Sim2RealError):
    pass


class SceneSamplingError(Sim2RealError):
    pass


class ShapeError(Sim2RealError, ValueError):
    pass


class CacheError(Sim2RealError):
    pass


class EmptyInputError(Sim2RealError, ValueError):
    pass


class RegimeMismatchError(Sim2RealError):
    pass


class DivergenceError(Sim2RealError):
    def __init__(self, message, epoch=None, step=None, terms=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.terms = terms


class DatasetIOError(Sim2RealError):
    pass


class DatasetFormatError(Sim2RealError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class FormatMismatchError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class LabelMismatchError(DatasetFormatError):
    pass

"""Exception hierarchy.

Errors split into two families so the CLI can map them onto exit codes:
``ConfigError`` (usage / configuration, exit 2) and ``DataError`` (anything
wrong with the inputs on disk or in memory, exit 3).
"""


class OdocError(Exception):
    pass


class ConfigError(OdocError):
    pass


class DataError(OdocError):
    pass


class ShapeMismatch(DataError, ValueError):
    pass


class UnknownPixelValue(DataError, ValueError):
    pass


class EncodingError(DataError):
    pass


class ContainmentViolation(DataError, ValueError):
    pass


class NonBinaryGroundTruth(DataError, ValueError):
    pass


class BoxOutOfBounds(DataError, ValueError):
    pass


class EmptyDataset(DataError):
    pass


class MissingLabels(DataError):
    pass


class MissingMask(DataError):
    pass


class IdMismatch(DataError):
    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)


class EmptyDisc(DataError, ValueError):
    pass


class DegenerateLabels(DataError, ValueError):
    pass


class UninitializedModel(OdocError):
    pass

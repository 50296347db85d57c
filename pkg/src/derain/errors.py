"""Exception hierarchy shared by all pipeline stages.

The CLI maps the three families onto exit codes: usage errors (1),
data errors (2) and numeric failures (3).
"""


class DerainError(Exception):
    exit_code = 2


class DataError(DerainError):
    exit_code = 2


class MissingCounterpart(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class DecodeFailure(DataError):
    pass


class InsufficientPairs(DataError):
    pass


class IoFailure(DataError):
    pass


class PlacementFailure(DataError):
    pass


class ConfigInvalid(DerainError):
    exit_code = 1


class ShapeMismatch(DataError):
    pass


class NonFiniteLoss(DerainError):
    exit_code = 3


class AllTriosSkipped(DataError):
    pass


class DetectorUnavailable(DataError):
    pass


class FingerprintMismatch(DataError):
    pass

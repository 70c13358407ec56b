"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PspError(Exception):
    exit_code = 4


class UsageError(PspError):
    exit_code = 2


class DataError(PspError):
    exit_code = 3


class InvariantViolation(PspError):
    exit_code = 4


class InvalidParam(UsageError):
    pass


class MalformedRecord(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class EmptyFile(DataError):
    pass


class DimMismatch(DataError):
    pass


class KTooLarge(UsageError):
    pass


class EmptyTruth(DataError):
    pass


class TruthMismatch(DataError):
    pass


class DegenerateDataset(DataError):
    pass


class DegenerateQuery(DataError):
    pass


class SingleClassData(DataError):
    pass


class EmptyCluster(DataError):
    pass


class BadMagic(DataError):
    pass


class VersionUnsupported(DataError):
    pass


class ChecksumMismatch(DataError):
    pass

"""Exception hierarchy shared by every module of the package."""


class RecgError(Exception):
    """Base class for all package errors."""


# wfdb_io
class MalformedHeader(RecgError):
    pass


class UnsupportedFormat(RecgError):
    pass


class TruncatedSignal(RecgError):
    pass


class MalformedAnnotation(RecgError):
    pass


class RecordIOError(RecgError, OSError):
    pass


# preprocess
class InvalidWindow(RecgError, ValueError):
    pass


class EmptyDataset(RecgError, ValueError):
    pass


# tensor core
class ShapeMismatch(RecgError, ValueError):
    pass


class InvalidRate(RecgError, ValueError):
    pass


class NotScalar(RecgError, ValueError):
    pass


# model
class SingularCovariance(RecgError, ArithmeticError):
    pass


class NotFitted(RecgError, RuntimeError):
    pass


# training
class IndexOutOfRange(RecgError, IndexError):
    pass


class VersionMismatch(RecgError):
    pass


class RegistryMismatch(RecgError):
    pass


# evaluation
class DegenerateClass(RecgError, ValueError):
    pass

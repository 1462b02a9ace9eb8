"""Exception types raised across the package."""


class GttaError(Exception):
    pass


class ShapeMismatch(GttaError, ValueError):
    pass


class NonFinite(GttaError, ValueError):
    pass


class DomainError(GttaError, ValueError):
    pass


class AxisOutOfRange(GttaError, IndexError):
    pass


class InvalidDistribution(GttaError, ValueError):
    pass


class IndexOutOfRange(GttaError, IndexError):
    pass


class NotScalar(GttaError, ValueError):
    pass


class DetachedTensor(GttaError, RuntimeError):
    pass


class MissingGradient(GttaError, RuntimeError):
    pass


class CheckpointError(GttaError, ValueError):
    pass


# synthdata
class EmptyDomain(GttaError, ValueError):
    pass


class BadMagic(GttaError, ValueError):
    pass


class VersionMismatch(GttaError, ValueError):
    pass


# grt
class BadK(GttaError, ValueError):
    pass


class InvalidLambda(GttaError, ValueError):
    pass


# tpd
class ZeroWeightColumn(GttaError, ValueError):
    pass


class EmptyBank(GttaError, ValueError):
    pass


class EmptyClass(GttaError, AssertionError):
    pass


class EmptyNeighborSet(GttaError, ValueError):
    pass


# harness
class SingleClassSource(GttaError, ValueError):
    pass


class EmptyEval(GttaError, ValueError):
    pass


class SingleClassEval(GttaError, ValueError):
    pass


# cli
class UsageError(GttaError):
    pass


class ConfigParseError(GttaError):
    pass

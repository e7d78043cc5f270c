"""Exception types raised across the package."""


class RefmapError(Exception):
    """Base class for every error raised by refmap."""


class TensorFormatError(RefmapError):
    pass


class BadMagic(TensorFormatError):
    pass


class ShapeOverflow(TensorFormatError):
    pass


class NonFiniteValue(TensorFormatError):
    pass


class SchemaError(RefmapError):
    pass


class EmptyRegions(SchemaError):
    pass


class DimensionMismatch(RefmapError):
    pass


class EmptyInput(RefmapError):
    pass


class OutOfRange(RefmapError):
    pass


class ZeroMass(RefmapError):
    pass


class NoGroundTruth(RefmapError):
    pass


class QueryCountMismatch(RefmapError):
    pass

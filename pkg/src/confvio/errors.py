"""Exception hierarchy shared by all modules."""


class VioError(Exception):
    """Base class for library errors."""


class InvalidInputError(VioError, ValueError):
    """Input violates a documented precondition."""


class DegenerateGeometryError(VioError):
    """Camera geometry is rank deficient or has zero baseline."""


class TransferDegenerateError(DegenerateGeometryError):
    """Point-line-point transfer produced a point at (or near) infinity."""


class NumericalFailureError(VioError):
    """Factorization failed even after reconditioning."""


class ConfigError(VioError, ValueError):
    """Configuration or scenario rejected during validation."""


class DataFormatError(VioError, ValueError):
    """Malformed or missing input file."""

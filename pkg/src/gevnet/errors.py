"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`GevnetError`
so callers (the CLI in particular) can separate contract failures from bugs.
"""


class GevnetError(Exception):
    """Base class for all package errors."""


class ContractViolation(GevnetError, ValueError):
    """An input breaks a documented precondition."""


class SingularGeometryError(GevnetError, ValueError):
    """Geometry is undefined for the input (e.g. antipodal points)."""


class ResourceLimitError(GevnetError, ValueError):
    """A size guard was exceeded (grid level too large, oracle on a big grid)."""


class UnsupportedTypeError(GevnetError, ValueError):
    """Feature type or irrep outside the supported set."""


class ResolutionError(GevnetError, ValueError):
    """A sampling resolution (quadrature points, nonlinearity samples) is too small."""


class ShapeMismatchError(GevnetError, ValueError):
    """Array shapes or grid levels do not line up."""


class FormatError(GevnetError, ValueError):
    """A file on disk is malformed, truncated, or of the wrong version."""


class ConfigError(GevnetError, ValueError):
    """Configuration is invalid or inconsistent with cached artifacts."""

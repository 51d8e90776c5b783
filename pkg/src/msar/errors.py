"""Exception types shared across the package.

The CLI maps these onto process exit codes (config 2, data 3, numeric 4),
so library code should raise the most specific one that applies.
"""


class MsarError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MsarError):
    """Operand dimensions do not line up."""


class ContractError(MsarError):
    """A documented precondition was violated by the caller."""


class ConfigError(MsarError):
    """Invalid configuration, unsupported layout, or file-format mismatch."""


class DataError(MsarError):
    """Bad input data: too-short signals, unknown tokens, empty datasets."""


class SingularMatrixError(MsarError):
    """Linear system has no usable solution even after diagonal loading."""


class NumericAbort(MsarError):
    """Training produced a non-finite loss; carries diagnostic context."""

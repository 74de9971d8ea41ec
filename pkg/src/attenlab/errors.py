"""Exception hierarchy shared by every attenlab module."""


class AttenlabError(Exception):
    """Base class for all library errors."""


class DimensionError(AttenlabError, ValueError):
    """Shapes or extents are incompatible with an operation."""


class ContractError(AttenlabError, ValueError):
    """A precondition on argument values was violated."""


class NumericError(AttenlabError, ArithmeticError):
    """A computation produced or received NaN/Inf."""


class ConfigError(AttenlabError, ValueError):
    """An inconsistent model, training, or run configuration."""


class FormatError(AttenlabError, ValueError):
    """A file or byte stream does not follow its declared format."""


class InputError(AttenlabError, ValueError):
    """Unusable input data (empty dataset, zero-area image, ...)."""

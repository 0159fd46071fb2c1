"""Exception hierarchy shared by all abcode modules."""


class AbcError(Exception):
    """Base class; the CLI maps any of these to exit status 1."""


class DegeneratePriorError(AbcError, ValueError):
    pass


class ZeroVectorError(AbcError, ValueError):
    pass


class ShapeError(AbcError, ValueError):
    """Dimension or length mismatch between operands."""


class FormatError(AbcError):
    """Malformed ABCB / ABCF / ABCM file."""


class EmptyDatasetError(FormatError):
    pass


class DivergenceError(AbcError, FloatingPointError):
    """Non-finite values appeared during training."""


class ProtocolError(AbcError, ValueError):
    """A split or sampling request cannot be satisfied by the dataset."""


class ConfigError(AbcError, ValueError):
    pass

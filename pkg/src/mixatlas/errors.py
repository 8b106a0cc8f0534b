"""Exception hierarchy shared by every module of the package."""


class MixAtlasError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(MixAtlasError, ValueError):
    pass


class InversionFailure(MixAtlasError, ArithmeticError):
    pass


class SingularCovariance(MixAtlasError, ArithmeticError):
    pass


class NonPositiveVariance(MixAtlasError, ArithmeticError):
    pass


class DegenerateWeights(MixAtlasError, ArithmeticError):
    """All label weights of an image vanished, usually a diverged chain."""


class ChainDiverged(MixAtlasError, RuntimeError):
    """The truncation counter passed its configured ceiling."""


class EmptyDataset(MixAtlasError, ValueError):
    pass


class ParseError(MixAtlasError, ValueError):
    pass


class MissingFile(MixAtlasError, FileNotFoundError):
    pass


class ConfigError(MixAtlasError, ValueError):
    pass

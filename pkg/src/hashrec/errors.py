"""Exception types shared across the package."""


class HashrecError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(HashrecError, ValueError):
    """Operands have incompatible shapes or code lengths."""


class MetricUndefinedError(HashrecError, ValueError):
    """A metric has no eligible case (e.g. ranking with no usable user)."""


class SplitError(HashrecError, ValueError):
    """A train/test split request cannot be satisfied."""


class VocabularyError(HashrecError, ValueError):
    """No usable terms were found to build a vocabulary."""


class ConfigError(HashrecError, ValueError):
    """A run configuration file or override cannot be parsed."""


class DivergenceError(HashrecError, RuntimeError):
    """Training produced a non-finite loss."""


class InfeasibleDimensionError(HashrecError, ValueError):
    """A constraint projection is impossible for the given shape."""


class SolverInvariantError(HashrecError, RuntimeError):
    """A descent or aggregate invariant was violated (debug checks)."""


class ArtifactError(HashrecError, ValueError):
    """A model artifact or checkpoint file is malformed."""

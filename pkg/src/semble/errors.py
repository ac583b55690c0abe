"""Exception types shared across the package."""


class SembleError(Exception):
    """Base class for every package-specific error."""


class SchemaError(SembleError):
    """Mismatched characteristic schemas or incompatible array shapes."""


class DomainError(SembleError):
    """Input outside an operation's domain (empty set, bad k, out-of-range score)."""


class ConfigError(SembleError):
    """Invalid configuration value."""


class DegenerateInputError(SembleError):
    """Numerically degenerate input, e.g. a constant distance-matrix row."""


class NormalizationError(SembleError):
    """A vector that must have unit L2 norm does not."""


class FormatError(SembleError):
    """Malformed data file: manifest, blob, checkpoint or embedding export."""


class NotEnoughRatersError(SembleError):
    """Raised when an item has too few ratings for a rater-distribution metric.

    Callers aggregating over a dataset treat this as a skip signal for the
    item, not as a failure of the whole computation.
    """

"""Exception taxonomy shared across the package.

CLI exit-code mapping: UsageError -> 1, configuration/data errors -> 2,
anything else -> 3.
"""


class ShapeError(ValueError):
    """Tensor/layer dimension mismatch."""


class ConfigError(ValueError):
    """Invalid configuration value (stride, factor, window, fractions...)."""


class GraphBuildError(ValueError):
    """Layer-spec list cannot be built into a valid graph."""


class DataError(ValueError):
    """Dataset-level problem (bad label, mismatched image dims, missing stats)."""


class ManifestError(DataError):
    """Manifest parse failure; message carries the offending row or field."""


class IntegrityError(DataError):
    """Corrupt or inconsistent artifact (duplicate frames, truncated weights, digest mismatch)."""


class StateError(RuntimeError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class MetricError(ValueError):
    """Metric undefined for the given inputs (e.g. single-class AUC)."""


class NumericError(ArithmeticError):
    """Non-finite value produced by a kernel."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


class UsageError(Exception):
    """Command-line usage problem."""

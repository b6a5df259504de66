"""Exception hierarchy shared across the toolkit."""

from __future__ import annotations


class PDPruneError(Exception):
    """Base class for every error raised by pdprune."""


class ConfigurationError(PDPruneError, ValueError):
    pass


class EmptyModelError(PDPruneError):
    """Raised when a removal plan would leave no blocks to run."""


class TrainingDivergenceError(PDPruneError, FloatingPointError):
    pass


class NumericError(PDPruneError, FloatingPointError):
    pass


class DegenerateInputError(PDPruneError, ValueError):
    """A hidden vector with zero norm makes cosine similarity undefined."""


class InfeasibleError(PDPruneError):
    """Not enough disjoint removal elements to reach the requested k."""


class TooLargeError(PDPruneError):
    pass


class ConsistencyError(PDPruneError):
    """Artifacts (plans, caches, manifests, models) disagree with each other."""


class ManifestError(PDPruneError):
    pass


class BadMagicError(ManifestError):
    pass


class UnsupportedVersionError(ManifestError):
    pass


class ChecksumError(ManifestError):
    pass


class ShapeError(ManifestError):
    pass


class TruncatedError(ManifestError):
    pass

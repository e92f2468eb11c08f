"""Exception hierarchy.

Every error raised on a contract violation names the offending component and
the expected/actual values where that is cheap to do, so CLI wrappers can turn
them into readable diagnostics without string surgery.
"""

from __future__ import annotations


class FaceAdapterError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolationError(FaceAdapterError):
    """An argument broke a documented precondition (shape, dtype, range)."""


class FormatError(FaceAdapterError):
    """A file on disk does not match its documented format."""


class ConfigurationError(FaceAdapterError):
    """A run configuration is inconsistent or incomplete."""


class IngestionError(FaceAdapterError):
    """A dataset record is unusable (missing frame, bad mask, short identity)."""


class ExtractionError(FaceAdapterError):
    """A feature extractor could not produce a usable embedding."""


class SamplingError(FaceAdapterError):
    """The sampler was driven outside its valid regime (bad t, non-finite state)."""


class CheckpointError(FaceAdapterError):
    """A checkpoint is missing, malformed, or from an incompatible architecture."""


class MetricError(FaceAdapterError):
    """A metric was asked to score degenerate inputs (zero-norm embedding, shape mismatch)."""

"""Exception hierarchy shared across the toolkit."""


class ClipPatchError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(ClipPatchError, ValueError):
    """An argument violates an operation's precondition."""


class DimensionError(ParameterError):
    """Patch or tensor shapes are incompatible."""


class PlacementError(ParameterError):
    """A patch placement falls outside the image."""


class BackendError(ClipPatchError):
    """An encoder backend produced unusable output."""


class CapabilityError(ClipPatchError):
    """The backend lacks a required capability (e.g. gradients) or is unavailable."""


class UndefinedMetricError(ClipPatchError):
    """A metric has an empty denominator."""


class IngestError(ClipPatchError):
    """Dataset or video ingestion failed."""


class IntegrityError(ClipPatchError):
    """A persisted artifact is truncated or corrupt."""


class IncompatibleVersionError(ClipPatchError):
    """A persisted artifact was written by an unsupported format version."""

"""Exception types raised across the package."""


class HopsegError(Exception):
    """Base class for all package errors."""


class InvalidSpecError(HopsegError):
    """A neighborhood/window specification is malformed or infeasible."""


class InvalidShapeError(HopsegError):
    """An array or volume has a shape incompatible with the operation."""


class InsufficientDataError(HopsegError):
    """Not enough samples to fit a transform or classifier."""


class EmptyHopError(HopsegError):
    """Energy threshold discarded every AC child of a hop."""


class DegenerateLabelsError(HopsegError):
    """Training labels contain fewer than two classes."""


class EmptySupervisionError(HopsegError):
    """No voxel passed the confidence filter at some hop."""


class MetadataError(HopsegError):
    """Required volume metadata (e.g. spacing) is missing or invalid."""


class ModelFormatError(HopsegError):
    """A model file is corrupt or has an unsupported format version."""


class IngestError(HopsegError):
    """A case on disk could not be read or is inconsistent."""

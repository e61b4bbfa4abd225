"""Exception hierarchy shared by the pipeline modules."""


class AortaCascadeError(Exception):
    """Base class for all package errors."""


class FormatError(AortaCascadeError):
    """File is not a readable NIfTI-1 image."""


class OrientationError(AortaCascadeError):
    """Image affine is oblique (not a permutation/flip of the canonical axes)."""


class DataError(AortaCascadeError, ValueError):
    """Voxel payload is invalid (NaN, non-binary mask, ...)."""


class EmptyMaskError(DataError):
    pass


class DetectionFailureError(AortaCascadeError):
    """No axial slice passes the heavy-slice threshold."""


class EncodeRangeError(AortaCascadeError, ValueError):
    """Box does not fit inside the anchor and cannot be encoded."""


class UndefinedMetricError(AortaCascadeError, ValueError):
    pass


class DegenerateTestError(AortaCascadeError, ValueError):
    """All paired differences are zero."""


class BackendError(AortaCascadeError):
    """A detection or segmentation backend failed."""

    def __init__(self, message, stage=None):
        super().__init__(message if stage is None else f"[{stage}] {message}")
        self.stage = stage

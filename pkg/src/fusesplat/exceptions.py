"""Exception types raised across the package."""


class FuseSplatError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(FuseSplatError, ValueError):
    """A parameter is non-finite or outside its admissible domain."""


class ShapeError(FuseSplatError, ValueError):
    """Array shapes or coefficient counts are inconsistent."""


class SceneFormatError(FuseSplatError):
    """A scene or checkpoint file could not be decoded.

    ``offset`` is the byte offset at which decoding failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(FuseSplatError):
    """A CMA checkpoint is corrupted or has an incompatible header."""


class DatasetError(FuseSplatError):
    """A dataset directory or manifest is malformed."""


class ImageDecodeError(FuseSplatError):
    """An image file could not be decoded."""


class ContractViolation(FuseSplatError):
    """Backward pass inputs do not match the forward pass they refer to."""


class TrainingError(FuseSplatError, RuntimeError):
    """Training diverged or was started with unusable inputs."""


class ValidationError(FuseSplatError, ValueError):
    """Decoded data violates a domain constraint (e.g. unknown modality tag)."""

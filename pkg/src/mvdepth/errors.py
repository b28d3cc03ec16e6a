"""Exception hierarchy shared by all mvdepth modules."""


class MVDepthError(Exception):
    """Base class for all domain errors raised by this package."""


class NonPositiveDepth(MVDepthError):
    """A point or requested depth lies on or behind the camera plane."""


class InvalidRange(MVDepthError):
    """A depth-hypothesis range or sample count is unusable."""


class EmptyMeasurementSet(MVDepthError):
    """Cost-volume construction was asked to fuse zero measurement frames."""


class ShapeMismatch(MVDepthError):
    """Array dimensions are incompatible with the requested operation."""


class InvalidConfig(MVDepthError):
    """A network or run configuration is internally inconsistent."""


class ResolutionMismatch(MVDepthError):
    """Prediction and ground truth have different resolutions."""


class EmptyOverlap(MVDepthError):
    """No pixel is valid in both prediction and ground truth."""


class InvalidFactor(MVDepthError):
    """A spatial scale factor lies outside the supported range."""


class DecodeError(MVDepthError):
    """An image file could not be decoded."""


class BitDepthError(MVDepthError):
    """An image file has an unsupported pixel format."""


class FormatError(MVDepthError):
    """A PFM or binary volume file is malformed."""


class EmptyResult(MVDepthError):
    """Timestamp association produced no matched triples."""

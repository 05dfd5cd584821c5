"""Exception types shared across the package."""


class BurnsightError(Exception):
    """Base class for all runtime failures raised by this package."""


class ImageFormatError(BurnsightError):
    """Raised for unreadable or unsupported image files."""


class ManifestError(BurnsightError):
    """Raised for malformed or inconsistent dataset manifests."""


class CheckpointError(BurnsightError):
    """Raised for malformed model checkpoint files."""


class FeatureFileError(BurnsightError):
    """Raised for malformed feature vector files."""


class TrainingError(BurnsightError):
    """Raised when training cannot proceed (bad data, non-finite loss)."""


class ExplainError(BurnsightError):
    """Raised when an explanation cannot be computed."""

"""Cross-channel augmentation for aspect-based sentiment classification."""

from .errors import CCAugError

__version__ = "0.1.0"

__all__ = ["CCAugError", "__version__"]

"""
markerless - Two-camera markerless joint-angle estimation driven by a multimodal agent.
"""

from .errors import MarkerlessError

__version__ = "0.1.0"

__all__ = ["MarkerlessError", "__version__"]

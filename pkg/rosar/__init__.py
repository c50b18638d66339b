"""
Adversarial robustness laboratory for a micro sonar object detector.
"""

try:
    from ._version import __version__
except ImportError:  # pragma: no cover
    __version__ = "0.0.0.dev0"

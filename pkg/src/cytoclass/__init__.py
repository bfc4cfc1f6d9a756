"""Cervical cell classification: HOG features with kNN, random forests,
gradient boosting and SVMs, plus a residual CNN, all on numpy."""

from .dataset import CLASS_NAMES

__version__ = "0.1.0"
__all__ = ["CLASS_NAMES", "__version__"]

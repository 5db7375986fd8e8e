"""Scene coordinate regression with error-guided feature selection on synthetic scenes."""

__version__ = "0.1.0"

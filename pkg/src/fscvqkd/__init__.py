"""Free-space CV-QKD finite-size key rates."""
__version__ = "0.1.0"

"""Multi-subject visual decoding engine with RSA-guided subject tokens."""

__version__ = "0.1.0"

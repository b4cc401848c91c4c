"""Degenerate semilinear parabolic problems under bilinear control."""
__version__ = "0.1.0"

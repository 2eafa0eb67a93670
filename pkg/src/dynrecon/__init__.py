"""Articulated neural radiance fields with geometric supervision, built on a small numpy autodiff."""

__version__ = "0.1.0"

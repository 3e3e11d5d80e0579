"""Geometry-aware multi-view policy toolkit on a small numpy autodiff core."""

__version__ = "0.1.0"

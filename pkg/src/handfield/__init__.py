"""Animatable hand radiance fields on synthetic multi-view scenes."""

__version__ = "0.1.0"

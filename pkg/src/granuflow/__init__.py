"""Granular-flow laboratory: DEM ground truth, boundary-aware graph samples,
a numpy message-passing surrogate and trajectory analysis."""

__version__ = "0.1.0"

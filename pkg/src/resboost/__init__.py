"""Residual boosting of frozen tabular scorers with guarded symbolic experts."""

__version__ = "0.1.0"

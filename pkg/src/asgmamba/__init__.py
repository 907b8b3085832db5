"""Adaptive spectral gating Mamba forecaster on a small numpy autodiff core."""

__version__ = "0.1.0"

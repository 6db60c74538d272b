"""Error-state MPC with online Fourier-feature residual learning for surface vessels."""

__version__ = "0.1.0"

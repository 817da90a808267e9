"""Audio-conditioned stochastic video prediction at desk scale."""

__version__ = "0.1.0"

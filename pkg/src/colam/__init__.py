"""Co-learning of network parameters and per-class soft labels by alternating minimization."""

__version__ = "0.1.0"

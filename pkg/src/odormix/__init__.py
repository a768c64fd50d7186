"""Multi-label odor prediction for single molecules and two-molecule mixtures."""

__version__ = "0.1.0"

"""Polarization-aided multi-view reconstruction on explicit Gaussian point sets."""

__version__ = "0.1.0"

"""Cryo-electron tomography simulation and particle-picking benchmark toolkit."""

__version__ = "0.1.0"

"""Simulation and analysis of entangled photon pairs from a quantum-dot cascade sent through frequency converters and fiber."""

__version__ = "0.1.0"

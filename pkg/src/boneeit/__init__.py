"""Simulation and linearised EIT reconstruction of load and failure in
conductive bone cement."""

__version__ = "0.1.0"

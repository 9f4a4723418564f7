"""Qubit in front of a mirror with a long feedback loop: trajectory simulation and analysis."""
__version__ = "0.1.0"

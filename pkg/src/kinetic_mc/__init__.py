"""Monte Carlo particle simulation of linear symmetric kinetic exchange models."""

__version__ = "0.1.0"

"""Distributed automatic load control: simulation, optimality oracle and certificates."""

__version__ = "0.1.0"

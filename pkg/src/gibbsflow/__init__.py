"""Lattice interacting-particle dynamics with exact relative-entropy diagnostics."""

__version__ = "0.1.0"

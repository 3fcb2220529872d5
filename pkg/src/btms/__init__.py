"""Learnable behavior trees with parametric movement skills."""

__version__ = "0.1.0"

"""Looped depth up-scaling for a toy decoder-only transformer."""

__version__ = "0.1.0"

"""Desk-scale emulator of a GPU confidential-computing trust architecture."""

__version__ = "0.1.0"

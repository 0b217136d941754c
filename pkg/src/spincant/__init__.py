"""Cantilever-spin dynamics for single-spin MRFM by cyclic adiabatic inversion."""

__version__ = "0.1.0"

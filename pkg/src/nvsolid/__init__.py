"""Simulator for NV-detected isotropic chemical shifts in rotating-field solid-state NMR."""

__version__ = "0.1.0"

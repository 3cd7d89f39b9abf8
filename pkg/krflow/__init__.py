"""Numerical lab for the Kähler-Ricci flow on the flat torus from singular data."""

__version__ = "0.1.0"

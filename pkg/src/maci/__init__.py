"""Convex integration for the von Karman / Monge-Ampere system."""

__version__ = "0.1.0"

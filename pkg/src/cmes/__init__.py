"""Collaborative mixed-exercise sampling for cognitive diagnosis."""

__version__ = "0.1.0"

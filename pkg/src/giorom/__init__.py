"""Learned Lagrangian particle dynamics on sparse radius graphs."""

__version__ = "0.1.0"

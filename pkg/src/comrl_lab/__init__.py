"""Desk-scale laboratory for context-based offline meta-RL task representations."""

__version__ = "0.1.0"

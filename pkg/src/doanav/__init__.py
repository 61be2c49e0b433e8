"""Directed object attention navigation agent on a synthetic object-goal gridworld."""

__version__ = "0.1.0"

"""Offline actor-critic training that penalises Q-values on simulator-visited states."""

__version__ = "0.1.0"

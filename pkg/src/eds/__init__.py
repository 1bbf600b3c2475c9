"""Symbolic toolkit for decomposable Pfaffian systems with Darboux pairs:
coframe adaptation, Vessiot algebra extraction, and superposition formulas."""

__version__ = "0.1.0"

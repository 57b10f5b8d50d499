"""Weak-to-strong episodic grounding on a symbolic household micro-world."""

__version__ = "0.1.0"

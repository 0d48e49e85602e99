"""Interpreter, learner and embedding-space reasoner for tensor logic."""

__version__ = "0.1.0"

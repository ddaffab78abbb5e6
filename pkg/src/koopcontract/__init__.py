"""Koopman liftings, contraction metrics and their numerical certification."""

__version__ = "0.1.0"

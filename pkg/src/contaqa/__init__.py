"""Continual score regression with graph-based features and score-aware rehearsal."""

__version__ = "0.1.0"

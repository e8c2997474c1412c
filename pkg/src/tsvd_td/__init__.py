"""Truncated-SVD temporal-difference learning for multi-task policy evaluation."""

__version__ = "0.1.0"

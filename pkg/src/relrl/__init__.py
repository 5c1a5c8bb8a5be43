"""Domain-independent symbolic relational deep-RL engine."""

__version__ = "0.1.0"

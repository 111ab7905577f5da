"""Random-encoder state-entropy exploration on partially observable gridworlds."""

__version__ = "0.1.0"

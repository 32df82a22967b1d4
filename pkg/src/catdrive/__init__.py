"""Closed-loop adversarial scenario generation and training for 2D driving."""

__version__ = "0.1.0"

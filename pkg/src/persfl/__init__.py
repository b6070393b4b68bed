"""Personalized federated learning through optimal-teacher distillation."""

__version__ = "0.1.0"

"""Deterministic federated-learning simulator with coupled stability measurement."""

__version__ = "0.1.0"

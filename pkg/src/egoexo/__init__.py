"""Ego/exo cross-view motion transfer: features, mappers, scorers and retrieval evaluation."""

__version__ = "0.1.0"

"""Federated learning for user authentication with projected class embeddings."""

__version__ = "0.1.0"

"""Real-time neural hand rendering at desk scale."""

__version__ = "0.1.0"

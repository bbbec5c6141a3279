"""Multi-encoder video representation: alignment, projection, fusion, cost and scheduling."""
__version__ = "0.1.0"

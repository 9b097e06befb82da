"""Few-shot bioacoustic event detection with shallow prototypical embeddings."""

__version__ = "0.1.0"

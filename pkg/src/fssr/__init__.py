"""Few-shot speaker identification from spectrograms."""

__version__ = "0.1.0"

"""Text-prompted voice attribute editing in speaker-embedding space."""

__version__ = "0.1.0"

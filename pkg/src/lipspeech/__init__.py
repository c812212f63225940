"""CPU-scale lip-to-speech synthesis pipeline."""

__version__ = "0.1.0"

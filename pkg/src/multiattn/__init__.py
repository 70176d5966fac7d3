"""Multi-attention encoder-decoder models for word sense disambiguation."""

__version__ = "0.1.0"

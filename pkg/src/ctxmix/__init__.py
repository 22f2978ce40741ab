"""Value-zeroing context mixing scores and their evaluation on toy Transformer encoders."""

__version__ = "0.1.0"

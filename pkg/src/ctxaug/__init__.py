"""Context augmentation: generated contexts as auxiliary variables for inference on text."""

__version__ = "0.1.0"
